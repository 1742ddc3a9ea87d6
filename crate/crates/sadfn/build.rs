use std::process::Command;

/// Embed a best-effort version string so run logs can record which build
/// produced an artifact. Falls back to the crate version when the build
/// happens outside a git checkout.
fn main() {
    let git = Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    let version = match git {
        Some(desc) => format!("{}+{}", env!("CARGO_PKG_VERSION"), desc),
        None => env!("CARGO_PKG_VERSION").to_string(),
    };
    println!("cargo:rustc-env=SADFN_BUILD_VERSION={version}");
    println!("cargo:rerun-if-changed=build.rs");
}
