use clap::Parser;

fn main() {
    let cli = kvlab::Cli::parse();
    match kvlab::run(&cli) {
        Ok(text) => {
            if !text.is_empty() {
                println!("{}", text.trim_end());
            }
        }
        Err(e) => {
            eprintln!("kvlab: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
