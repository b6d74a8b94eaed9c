//! Writes every built-in task preset as JSON into a directory
//! (default `presets/`), suitable for `--config`.

use safe_fbsde::config::{RunConfig, Task};

fn main() -> safe_fbsde::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "presets".into());
    std::fs::create_dir_all(&dir)?;
    for task in Task::ALL {
        let path = std::path::Path::new(&dir).join(format!("{}.json", task.name()));
        std::fs::write(&path, RunConfig::preset(task).to_json() + "\n")?;
        println!("{}", path.display());
    }
    Ok(())
}
