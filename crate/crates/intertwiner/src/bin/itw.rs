use std::process::exit;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(err) = intertwiner::cli::run(&args) {
        eprintln!("error: {err}");
        exit(intertwiner::cli::exit_code(&err));
    }
}
