fn main() {
    // placeholder while the library comes up
}
