fn main() {
    // CLI wired up once the library modules land.
    eprintln!("satflow: not yet wired");
    std::process::exit(1);
}
