fn main() {
    // Subcommands are wired once the training pipeline lands.
    eprintln!("berseg: not yet wired");
    std::process::exit(2);
}
