use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    let config = cbindgen::Config {
        language: cbindgen::Language::C,
        include_guard: Some("AUDIOTOOLAGENT_H".into()),
        cpp_compat: true,
        documentation: true,
        usize_is_size_t: true,
        header: Some("/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */".into()),
        ..Default::default()
    };
    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("generate C header")
        .write_to_file(crate_dir.join("include/audiotoolagent.h"));
    println!("cargo:rerun-if-changed=src/lib.rs");
}
