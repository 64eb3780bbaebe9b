//! Simulate a few scenes, write them with a manifest and read one back.

use rigidsim::datagen::{read_manifest, read_trajectory, simulate_scene, write_manifest, write_trajectory, Manifest, ManifestEntry, SceneConfig, Split};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("rigidsim_example_data");
    std::fs::create_dir_all(&dir)?;
    let config = SceneConfig::default();
    let mut entries = Vec::new();
    for seed in 0..4u64 {
        let t = simulate_scene(&config, seed)?;
        let file = format!("traj_{seed:05}.rgf");
        write_trajectory(&dir.join(&file), &t)?;
        println!("{file}: {} objects, {} frames at dt {:.4}s", t.objects.len(), t.frames(), t.dt);
        entries.push(ManifestEntry {
            file,
            split: if seed < 3 { Split::Train } else { Split::Test },
            seed,
        });
    }
    write_manifest(&dir.join("manifest.json"), &Manifest { config, entries })?;

    let manifest = read_manifest(&dir.join("manifest.json"))?;
    let first = manifest.split(Split::Test).next().expect("one test entry");
    let t = read_trajectory(&dir.join(&first.file))?;
    let c = t.center(t.frames() - 1, 0);
    println!("test trajectory object 0 ends at ({:.3}, {:.3}, {:.3})", c[0], c[1], c[2]);
    println!("dataset in {}", dir.display());
    Ok(())
}
