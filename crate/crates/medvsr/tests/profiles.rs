use std::path::Path;

use medvsr::config::RunConfig;

#[test]
fn shipped_profiles_parse_and_validate() {
    for name in ["desk.cfg", "full.cfg"] {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
        let cfg = RunConfig::from_file(&path).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.train.min_lr, 1e-7, "{name}");
    }
}
