use std::path::PathBuf;

fn main() {
    let crate_dir = PathBuf::from(std::env::var("CARGO_MANIFEST_DIR").expect("manifest dir"));

    let mut config = cbindgen::Config::default();
    config.language = cbindgen::Language::C;
    config.cpp_compat = true;
    config.documentation = true;
    config.include_guard = Some("DSCACHE_H".to_string());
    config.usize_is_size_t = true;
    // C enum members live in the global namespace; keep them prefixed.
    config.enumeration.prefix_with_name = true;
    config.header = Some(
        "/* C interface for the dscache streaming KV-cache engine.\n\
         * Generated by cbindgen from crates/dscache-ffi; do not edit. */"
            .to_string(),
    );
    // The engine struct is deliberately opaque: only a forward declaration
    // crosses the boundary.
    config.after_includes = Some("typedef struct DscEngine DscEngine;".to_string());

    cbindgen::Builder::new()
        .with_crate(&crate_dir)
        .with_config(config)
        .generate()
        .expect("cbindgen generates the C header")
        .write_to_file(crate_dir.join("include").join("dscache.h"));

    println!("cargo:rerun-if-changed=src/lib.rs");
    println!("cargo:rerun-if-changed=build.rs");
}
