use std::path::PathBuf;

fn main() {
    let dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").unwrap());
    println!("cargo:rerun-if-changed=src/lib.rs");
    let res = cbindgen::Builder::new()
        .with_crate(&dir)
        .with_language(cbindgen::Language::C)
        .with_include_guard("CYSTONET_H")
        .with_documentation(true)
        .with_cpp_compat(true)
        .generate();
    match res {
        Ok(b) => {
            b.write_to_file(dir.join("include").join("cystonet.h"));
        }
        Err(e) => println!("cargo:warning=header generation failed: {e}"),
    }
}
