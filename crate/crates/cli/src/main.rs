fn main() -> anyhow::Result<()> {
    bayes_lsa_cli::run(std::env::args_os())
}
