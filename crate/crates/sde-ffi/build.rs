//! Regenerates `include/sde.h` from the annotated sources so the committed
//! header can never drift from the ABI.

fn main() {
    let crate_dir = std::env::var("CARGO_MANIFEST_DIR").unwrap();
    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=cbindgen.toml");

    let header = std::path::Path::new(&crate_dir).join("include/sde.h");
    cbindgen::generate(&crate_dir)
        .expect("C header generation failed")
        .write_to_file(header);
}
