fn main() {
    println!("backparse");
}
