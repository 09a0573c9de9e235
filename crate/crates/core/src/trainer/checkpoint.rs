//! Versioned binary checkpoints with bit-exact round trips.
//!
//! Layout: magic, format version, a JSON header (model config plus adapter
//! wiring), then raw little-endian f64 tensor blocks in parameter
//! registration order.

use crate::error::{Error, Result};
use crate::lora::ScalingVector;
use crate::model::{build_model, ClassifierModel, ModelConfig};
use crate::rng::RngStream;
use crate::tensor::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"BDLCKPT\n";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct AdapterHeader {
    site: String,
    /// Expanded scaling vector (one entry per adapter rank).
    scaling: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    adapters: Vec<AdapterHeader>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
}

pub fn save(path: &Path, model: &ClassifierModel) -> Result<()> {
    let adapters = model
        .adapters()
        .map(|(site, a)| AdapterHeader {
            site: site.clone(),
            scaling: a.scaling.clone(),
        })
        .collect();
    let tensors = model
        .store
        .iter()
        .map(|(_, p)| TensorHeader {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
            trainable: p.trainable,
        })
        .collect();
    let header = Header {
        model: model.config.clone(),
        adapters,
        tensors,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(header_json.len() as u64).to_le_bytes())?;
    f.write_all(&header_json)?;
    for (_, p) in model.store.iter() {
        for &v in p.value.as_slice() {
            f.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ClassifierModel> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::input("not a checkpoint file (bad magic)"));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::input(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let mut len8 = [0u8; 8];
    f.read_exact(&mut len8)?;
    let header_len = u64::from_le_bytes(len8) as usize;
    let mut header_json = vec![0u8; header_len];
    f.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)?;

    // Rebuild the structure, then overwrite every tensor by name. The
    // rebuild RNG is irrelevant because all values come from the file.
    let mut model = build_model(&header.model, &mut RngStream::new(0))?;
    let sites: Vec<String> = header.adapters.iter().map(|a| a.site.clone()).collect();
    if !sites.is_empty() {
        let by_site: std::collections::BTreeMap<&str, &AdapterHeader> = header
            .adapters
            .iter()
            .map(|a| (a.site.as_str(), a))
            .collect();
        model.attach_adapters(
            &sites,
            |site| {
                let expanded = &by_site[site].scaling;
                ScalingVector::new(expanded.clone(), 1)
                    .expect("checkpoint scaling vector is valid")
            },
            &mut RngStream::new(0),
        )?;
    }

    for t in &header.tensors {
        let id = model.store.find(&t.name).ok_or_else(|| {
            Error::input(format!("checkpoint tensor {} has no home in model", t.name))
        })?;
        let p = model.store.get_mut(id);
        if p.value.rows() != t.rows || p.value.cols() != t.cols {
            return Err(Error::input(format!(
                "checkpoint tensor {} has shape {}x{}, model expects {}x{}",
                t.name,
                t.rows,
                t.cols,
                p.value.rows(),
                p.value.cols()
            )));
        }
        if p.trainable != t.trainable {
            return Err(Error::input(format!(
                "checkpoint tensor {} trainable flag mismatch",
                t.name
            )));
        }
        let mut data = vec![0.0f64; t.rows * t.cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_bits(u64::from_le_bytes(buf));
        }
        p.value = DenseMatrix::from_vec(t.rows, t.cols, data);
    }
    let mut extra = [0u8; 1];
    if f.read(&mut extra)? != 0 {
        return Err(Error::input("trailing bytes after checkpoint tensors"));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::adapter_sites;
    use tempfile::tempdir;

    fn small_model(with_adapters: bool) -> ClassifierModel {
        let cfg = ModelConfig {
            vocab_size: 30,
            embed_dim: 8,
            max_len: 10,
            num_heads: 2,
            num_blocks: 1,
            num_classes: 2,
            classifier_hidden: 8,
            ..ModelConfig::default()
        };
        let mut rng = RngStream::new(7);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        if with_adapters {
            let sites = adapter_sites(&cfg);
            model
                .attach_adapters(
                    &sites,
                    |_| ScalingVector::new(vec![1.0, 2.0], 1).unwrap(),
                    &mut rng,
                )
                .unwrap();
            // make adapter values non-trivial so the round trip is meaningful
            for (_, p) in model.store.iter_mut() {
                if p.trainable {
                    for v in p.value.as_mut_slice().iter_mut() {
                        *v += 0.125;
                    }
                }
            }
        }
        model
    }

    fn assert_stores_equal(a: &ClassifierModel, b: &ClassifierModel) {
        assert_eq!(a.store.len(), b.store.len());
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.trainable, pb.trainable);
            assert_eq!(
                pa.value.as_slice(),
                pb.value.as_slice(),
                "tensor {} differs",
                pa.name
            );
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let model = small_model(true);
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();
        assert_stores_equal(&model, &loaded);
        // save again: byte-identical file
        let path2 = dir.path().join("c2.bin");
        save(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn roundtrip_without_adapters() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let model = small_model(false);
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();
        assert_stores_equal(&model, &loaded);
        assert_eq!(loaded.adapters().count(), 0);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"NOTACKPTxxxxxxxxxxxx").unwrap();
        assert!(load(&path).is_err());
    }

    #[test]
    fn loaded_model_predicts_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let model = small_model(true);
        save(&path, &model).unwrap();
        let loaded = load(&path).unwrap();
        let batch = crate::model::Batch::from_samples(
            &[vec![1, 2, 3, 4], vec![5, 6, 7]],
            &[0, 1],
            model.config.max_len,
        )
        .unwrap();
        let a = model.forward(&batch).unwrap();
        let b = loaded.forward(&batch).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }
}
