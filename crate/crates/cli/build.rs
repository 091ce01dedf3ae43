// The acceptance runner includes test files from other crates and calls
// their test functions directly; this cfg keeps them plain functions.
fn main() {
    println!("cargo::rustc-check-cfg=cfg(itgan_acceptance)");
    println!("cargo::rustc-cfg=itgan_acceptance");
}
