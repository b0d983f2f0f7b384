//! Shapes of every message the built-in algorithms exchange.
//!
//! cargo run --example privacy_audit

use fedhier::runtime::{builtin_schemas, privacy_audit};

fn main() -> fedhier::Result<()> {
    for (id, schema) in builtin_schemas() {
        let fields: Vec<String> = schema.fields.iter().map(|f| format!("{}: {:?}", f.name, f.shape)).collect();
        println!("{id:<9} {:<16} [{}]", schema.message, fields.join(", "));
    }
    privacy_audit()?;
    println!("no field is indexed by observations");
    Ok(())
}
