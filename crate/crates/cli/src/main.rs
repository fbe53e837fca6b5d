fn main() {
    println!("mstc");
}
