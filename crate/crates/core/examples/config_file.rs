//! Parse a config file, apply overrides and print the digest that names the run directory.

use klnorm::config::{parse_config, render_config};

fn main() -> klnorm::error::Result<()> {
    let dir = std::env::temp_dir().join("klnorm-config-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("run.conf");
    std::fs::write(&path, "dataset = train.txt\nnorm_kind = klnorm\ntrain.beta0 = 0.05\nseeds = 1,2,3\n")?;

    let base = parse_config(Some(&path), &[])?;
    let tuned = parse_config(Some(&path), &["train.epochs=10".into(), "seeds=4,5".into()])?;
    println!("{}", render_config(&tuned));
    println!("digest {}  (file only: {})", tuned.digest(), base.digest());

    // seeds are not part of the digest, so runs with different seeds share a directory
    let reseeded = parse_config(Some(&path), &["train.epochs=10".into()])?;
    assert_eq!(reseeded.digest(), tuned.digest());

    match parse_config(Some(&path), &["train.betta0=1".into()]) {
        Err(e) => println!("typo rejected: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
