//! Command-line front end (placeholder while the stack is built).
pub fn dispatch<I: IntoIterator<Item = String>>(_argv: I) -> i32 {
    eprintln!("cli not wired yet");
    2
}
