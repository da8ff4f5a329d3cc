fn main() {
    // Placeholder; the CLI is wired up in cli.rs.
}
