use idhider::cli::{run_args, Env};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run_args(&args, &Env::from_process()) {
        Ok(m) => println!("{}", m.output_dir.display()),
        Err((code, msg)) => {
            if code == 0 {
                print!("{msg}");
            } else {
                eprintln!("error: {msg}");
            }
            std::process::exit(code);
        }
    }
}
