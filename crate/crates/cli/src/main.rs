fn main() {
    println!("gsa: pipeline CLI (under construction)");
}
