use clap::Parser;

fn main() {
    let cli = marginnce::cli::Cli::parse();
    std::process::exit(marginnce::cli::main_with(&cli));
}
