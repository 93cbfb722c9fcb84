//! Versioned binary container for toy-model weights.
//!
//! Layout: 8-byte magic `VSEAMTOY`, u32 version, seven u64 config fields,
//! then every weight array as little-endian f64 in a fixed order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Result, VseamError};
use crate::model::config::ToyConfig;
use crate::model::toy::{LayerWeights, ToyVlm, ToyWeights};

const MAGIC: &[u8; 8] = b"VSEAMTOY";
const VERSION: u32 = 1;

fn write_matrix<W: Write>(w: &mut W, m: &Array2<f64>) -> std::io::Result<()> {
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_vector<W: Write>(w: &mut W, m: &Array1<f64>) -> std::io::Result<()> {
    for v in m.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64<R: Read>(r: &mut R) -> std::io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_matrix<R: Read>(r: &mut R, rows: usize, cols: usize) -> std::io::Result<Array2<f64>> {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        data.push(read_f64(r)?);
    }
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape matches read count"))
}

fn read_vector<R: Read>(r: &mut R, len: usize) -> std::io::Result<Array1<f64>> {
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(read_f64(r)?);
    }
    Ok(Array1::from_vec(data))
}

pub fn save_toy_model(model: &ToyVlm, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| VseamError::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    let cfg = model.config();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for field in [
        cfg.num_layers,
        cfg.num_heads,
        cfg.hidden_dim,
        cfg.head_dim,
        cfg.vocab_size,
        cfg.image_token_count,
        cfg.max_seq_len,
    ] {
        w.write_all(&(field as u64).to_le_bytes())?;
    }
    let weights = model.weights();
    write_matrix(&mut w, &weights.token_embedding)?;
    write_matrix(&mut w, &weights.position_embedding)?;
    for layer in &weights.layers {
        write_vector(&mut w, &layer.attn_norm_gain)?;
        write_matrix(&mut w, &layer.w_query)?;
        write_matrix(&mut w, &layer.w_key)?;
        write_matrix(&mut w, &layer.w_value)?;
        write_matrix(&mut w, &layer.w_output)?;
        write_vector(&mut w, &layer.mlp_norm_gain)?;
        write_matrix(&mut w, &layer.w_mlp_in)?;
        write_matrix(&mut w, &layer.w_mlp_out)?;
    }
    write_vector(&mut w, &weights.final_norm_gain)?;
    write_matrix(&mut w, &weights.unembedding)?;
    w.flush()?;
    Ok(())
}

pub fn load_toy_model(path: &Path) -> Result<ToyVlm> {
    let file = File::open(path).map_err(|e| VseamError::io_at(path, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(VseamError::BadContainer(format!(
            "bad magic {:?} (expected {:?})",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut ver = [0u8; 4];
    r.read_exact(&mut ver)?;
    let version = u32::from_le_bytes(ver);
    if version != VERSION {
        return Err(VseamError::BadContainer(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }

    let mut fields = [0u64; 7];
    for f in &mut fields {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        *f = u64::from_le_bytes(buf);
    }
    let config = ToyConfig {
        num_layers: fields[0] as usize,
        num_heads: fields[1] as usize,
        hidden_dim: fields[2] as usize,
        head_dim: fields[3] as usize,
        vocab_size: fields[4] as usize,
        image_token_count: fields[5] as usize,
        max_seq_len: fields[6] as usize,
    };
    config.validate()?;
    let d = config.hidden_dim;

    let token_embedding = read_matrix(&mut r, config.vocab_size, d)?;
    let position_embedding = read_matrix(&mut r, config.max_seq_len, d)?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            attn_norm_gain: read_vector(&mut r, d)?,
            w_query: read_matrix(&mut r, d, d)?,
            w_key: read_matrix(&mut r, d, d)?,
            w_value: read_matrix(&mut r, d, d)?,
            w_output: read_matrix(&mut r, d, d)?,
            mlp_norm_gain: read_vector(&mut r, d)?,
            w_mlp_in: read_matrix(&mut r, d, config.mlp_dim())?,
            w_mlp_out: read_matrix(&mut r, config.mlp_dim(), d)?,
        });
    }
    let final_norm_gain = read_vector(&mut r, d)?;
    let unembedding = read_matrix(&mut r, d, config.vocab_size)?;

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(VseamError::BadContainer(
            "trailing bytes after weights".to_string(),
        ));
    }

    Ok(ToyVlm::from_parts(
        config,
        ToyWeights {
            token_embedding,
            position_embedding,
            layers,
            final_norm_gain,
            unembedding,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CaptureOptions, InterventionPlan, Modality, TokenSequence};

    #[test]
    fn roundtrip_preserves_logits() {
        let model = ToyVlm::seeded(ToyConfig::default(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.vseamtoy");
        save_toy_model(&model, &path).unwrap();
        let loaded = load_toy_model(&path).unwrap();

        let ids: Vec<u32> = (0..16)
            .map(|i| model.tokenizer().image_level_token(i))
            .chain(model.tokenizer().encode("is the picture light"))
            .collect();
        let tags: Vec<Modality> = (0..ids.len())
            .map(|i| if i < 16 { Modality::Image } else { Modality::Text })
            .collect();
        let seq = TokenSequence::new(ids, tags).unwrap();
        let (a, _) = model
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        let (b, _) = loaded
            .forward(&seq, &InterventionPlan::empty(), CaptureOptions::default())
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"NOTAMODL rest").unwrap();
        assert!(matches!(
            load_toy_model(&path),
            Err(VseamError::BadContainer(_))
        ));
    }
}
