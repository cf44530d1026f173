//! Dataset download helper. Every extracted file is checked against a
//! pinned SHA-256 digest; the library itself never touches the network.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::Args;
use flate2::read::GzDecoder;
use sha2::{Digest, Sha256};

const MNIST_URL: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";
const CIFAR_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";

pub const MNIST_FILES: &[(&str, &str)] = &[
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

pub const CIFAR_FILES: &[(&str, &str)] = &[
    ("data_batch_1.bin", "cee916563c9f80d84e3cc88e17fdc0941787f1244f00a67874d45b261883ada5"),
    ("data_batch_2.bin", "a591ca11fa1708a91ee40f54b3da4784ccd871ecf2137de63f51ada8b3fa57ed"),
    ("data_batch_3.bin", "bbe8596564c0f86427f876058170b84dac6670ddf06d79402899d93ceea26f67"),
    ("data_batch_4.bin", "014e562d6e23c72197cc727519169a60359f5eccd8945ad5a09d710285ff4e48"),
    ("data_batch_5.bin", "755304fc0b379caeae8c14f0dac912fbc7d6cd469eb67a1029a08a39453a9add"),
    ("test_batch.bin", "8e2eb146ae340b09e24670f29cabc6326dba54da8789dab6768acf480273f65b"),
];

#[derive(Args)]
pub struct FetchArgs {
    /// `mnist` or `cifar10`.
    #[arg(long)]
    dataset: String,
    /// Only check files already on disk.
    #[arg(long)]
    verify_only: bool,
    /// Base URL for the MNIST files, or the full URL of the CIFAR archive.
    #[arg(long)]
    mirror: Option<String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).with_context(|| format!("reading {}", path.display()))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Checks each `(file, digest)` under `dir`; the error lists every
/// missing or mismatched file.
pub fn verify(dir: &Path, files: &[(&str, &str)]) -> Result<()> {
    let mut bad = Vec::new();
    for (name, want) in files {
        let p = dir.join(name);
        if !p.exists() {
            bad.push(format!("{} missing", p.display()));
            continue;
        }
        let got = sha256_file(&p)?;
        if got != *want {
            bad.push(format!("{}: sha256 {got}, expected {want}", p.display()));
        }
    }
    if !bad.is_empty() {
        return Err(pcn::Error::Dataset(bad.join("; ")).into());
    }
    Ok(())
}

fn download(url: &str) -> Result<impl Read> {
    log::info!("downloading {url}");
    let resp = ureq::get(url).call().with_context(|| format!("fetching {url}"))?;
    Ok(resp.into_body().into_reader())
}

pub fn run(a: FetchArgs, root: &Path) -> Result<()> {
    let (dir, files) = match a.dataset.as_str() {
        "mnist" => (root.join("mnist"), MNIST_FILES),
        "cifar10" => (root.join("cifar-10-batches-bin"), CIFAR_FILES),
        other => bail!("unknown dataset '{other}' (expected mnist or cifar10)"),
    };
    if !a.verify_only {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        if a.dataset == "mnist" {
            let base = a.mirror.as_deref().unwrap_or(MNIST_URL);
            for (name, _) in files {
                let mut gz = GzDecoder::new(download(&format!("{base}/{name}.gz"))?);
                let p = dir.join(name);
                let mut out = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                io::copy(&mut gz, &mut out).with_context(|| format!("writing {}", p.display()))?;
            }
        } else {
            let url = a.mirror.as_deref().unwrap_or(CIFAR_URL);
            let mut archive = tar::Archive::new(GzDecoder::new(download(url)?));
            archive.unpack(root).with_context(|| format!("unpacking into {}", root.display()))?;
        }
    }
    verify(&dir, files)?;
    println!("{} verified in {}", a.dataset, dir.display());
    Ok(())
}
