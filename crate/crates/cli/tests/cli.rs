use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dsm");

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/data")
        .join(name)
}

fn write_config(dir: &Path, provider: &str) -> PathBuf {
    let text = format!(
        r#"name = "cli"
layer = 2
k = 2
output_dir = "out"
cache_dir = "cache"

[provider]
{provider}

[corpus]
path = "{corpus}"
limit = 5

[sweep]
layers = [2]
k = [0, 2]
"#,
        corpus = data("fixture20.conllu").display(),
    );
    let path = dir.join("dsm.toml");
    fs::write(&path, text).unwrap();
    path
}

const FIXTURE: &str = "kind = \"fixture\"\nseed = 4\nlayers = 3\nheads = 2";

fn dsm(args: &[&str], config: &Path) -> Output {
    Command::new(BIN)
        .args(args)
        .arg("--config")
        .arg(config)
        .env_remove("DSM_CACHE_DIR")
        .env_remove("DSM_SIDECAR_CMD")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap_or(-1)
}

#[test]
fn sidecar_protocol_matches_in_process_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let local = tmp.path().join("local");
    let remote = tmp.path().join("remote");
    fs::create_dir_all(&local).unwrap();
    fs::create_dir_all(&remote).unwrap();

    let c = write_config(&local, FIXTURE);
    let o = dsm(&["run"], &c);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let sidecar = format!("kind = \"sidecar\"\ncommand = \"{BIN} serve-fixture --seed 4 --layers 3 --heads 2\"");
    let c = write_config(&remote, &sidecar);
    let o = dsm(&["run"], &c);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let trees = |dir: &Path| -> Vec<String> {
        fs::read_to_string(dir.join("out/induced.conllu"))
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("# dsm."))
            .map(String::from)
            .collect()
    };
    assert_eq!(trees(&local), trees(&remote));
    let score = |dir: &Path| {
        fs::read_to_string(dir.join("out/eval-ud.tsv"))
            .unwrap()
            .lines()
            .find(|l| l.starts_with("uuas\t"))
            .map(String::from)
    };
    assert_eq!(score(&local), score(&remote));
}

#[test]
fn second_run_reports_up_to_date() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), FIXTURE);
    assert_eq!(code(&dsm(&["run"], &c)), 0);
    let o = dsm(&["run"], &c);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stderr).contains("up to date"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), FIXTURE);

    assert_eq!(code(&dsm(&["eval"], &c)), 3, "missing induced trees");
    assert_eq!(code(&dsm(&["run", "--set", "corpus.bogus=1"], &c)), 2, "unknown key");
    assert_eq!(code(&dsm(&["run"], &tmp.path().join("absent.toml"))), 6, "unreadable config");

    let dead = write_config(tmp.path(), "kind = \"sidecar\"\ncommand = \"/nonexistent/model-server\"");
    assert_eq!(code(&dsm(&["substitute"], &dead)), 4, "sidecar cannot start");

    let broken = tmp.path().join("broken.conllu");
    fs::write(&broken, "1\tword\n").unwrap();
    let o = dsm(&["substitute", "--set", &format!("corpus.path=\"{}\"", broken.display())], &c);
    assert_eq!(code(&o), 5, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn print_config_applies_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), FIXTURE);
    let o = dsm(&["print-config", "--set", "k=7", "--set", "eval.averaging=macro"], &c);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.lines().any(|l| l == "k = 7"), "{text}");
    assert!(text.contains("averaging = \"macro\""), "{text}");
}

#[test]
fn environment_selects_the_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let c = write_config(tmp.path(), FIXTURE);
    let o = Command::new(BIN)
        .args(["print-config", "--config"])
        .arg(&c)
        .env("DSM_SIDECAR_CMD", "my-server --flag")
        .env("DSM_CACHE_DIR", "/var/cache/dsm")
        .output()
        .unwrap();
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("kind = \"sidecar\""), "{text}");
    assert!(text.contains("command = \"my-server --flag\""), "{text}");
    assert!(text.contains("cache_dir = \"/var/cache/dsm\""), "{text}");
}
