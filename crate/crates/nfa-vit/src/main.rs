fn main() {
    // CLI wired up once the command layer lands.
}
