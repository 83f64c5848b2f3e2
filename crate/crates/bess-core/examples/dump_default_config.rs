//! Print the default scenario configuration as JSON. Handy for seeding a
//! config file to edit: `cargo run --example dump_default_config > my.json`

fn main() {
    let cfg = bess_core::config::ScenarioConfig::default();
    println!("{}", serde_json::to_string_pretty(&cfg).expect("default config serializes"));
}
