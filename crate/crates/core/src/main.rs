use clap::Parser;

fn main() {
    let cli = lsa_icl::cli::Cli::parse();
    std::process::exit(lsa_icl::cli::run(cli));
}
