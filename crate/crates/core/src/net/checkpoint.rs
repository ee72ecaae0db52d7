//! Network checkpoints: a short text header followed by little-endian f64
//! parameters.
//!
//! ```text
//! ttmlab-mlp 1
//! sizes=19,64,64,64,2
//! activation=silu
//! embed=fourier:8
//! extra=0
//! params=9730
//! end
//! <params × 8 bytes>
//! ```

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::net::mlp::{Mlp, MlpSpec};

const MAGIC: &str = "ttmlab-mlp 1";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn write_mlp<W: Write>(net: &Mlp, mut w: W) -> Result<()> {
    let s = net.spec();
    let sizes: Vec<String> = net.sizes().iter().map(|v| v.to_string()).collect();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "sizes={}", sizes.join(","))?;
    writeln!(w, "activation={}", s.activation)?;
    writeln!(w, "embed={}", s.embed)?;
    writeln!(w, "extra={}", s.extra)?;
    writeln!(w, "params={}", net.n_params())?;
    writeln!(w, "end")?;
    for p in net.params() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_mlp<R: BufRead>(mut r: R) -> Result<Mlp> {
    let mut line = String::new();
    let mut next = |r: &mut R| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("truncated header"));
        }
        Ok(line.trim_end_matches(['\n', '\r']).to_string())
    };
    if next(&mut r)? != MAGIC {
        return Err(bad("not a network checkpoint"));
    }
    let mut field = |r: &mut R, key: &str| -> Result<String> {
        let l = next(r)?;
        l.strip_prefix(key)
            .and_then(|v| v.strip_prefix('='))
            .map(str::to_string)
            .ok_or_else(|| bad(format!("expected '{key}=', got '{l}'")))
    };
    let sizes: Vec<usize> = field(&mut r, "sizes")?
        .split(',')
        .map(|v| v.parse().map_err(|_| bad(format!("bad layer size '{v}'"))))
        .collect::<Result<_>>()?;
    let activation = field(&mut r, "activation")?.parse()?;
    let embed = field(&mut r, "embed")?.parse()?;
    let extra: usize = field(&mut r, "extra")?.parse().map_err(|_| bad("bad extra count"))?;
    let n: usize = field(&mut r, "params")?.parse().map_err(|_| bad("bad parameter count"))?;
    if next(&mut r)? != "end" {
        return Err(bad("missing header terminator"));
    }
    if sizes.len() < 2 {
        return Err(bad("need at least one layer"));
    }
    let spec = MlpSpec {
        hidden: sizes[1..sizes.len() - 1].to_vec(),
        out: sizes[sizes.len() - 1],
        activation,
        embed,
        extra,
    };
    let zero = Mlp::zeros(spec.clone())?;
    if zero.sizes() != sizes.as_slice() {
        return Err(bad(format!(
            "input width {} does not match embedding and extra inputs ({})",
            sizes[0],
            zero.sizes()[0]
        )));
    }
    if zero.n_params() != n {
        return Err(bad(format!("header declares {n} params, layers need {}", zero.n_params())));
    }
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|_| bad("parameter block truncated"))?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Mlp::from_params(spec, params)
}

pub fn save_mlp(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mlp(net, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_mlp(path: impl AsRef<Path>) -> Result<Mlp> {
    read_mlp(std::io::BufReader::new(std::fs::File::open(path)?))
}
