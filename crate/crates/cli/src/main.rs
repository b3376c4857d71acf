use clap::Parser;

fn main() {
    let cli = infoform_cli::Cli::parse();
    match infoform_cli::run_cli(cli) {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::exit(1);
        }
    }
}
