fn main() { println!("{}", syrinx_core::placeholder()); }
