//! Plain-text checkpoint format.
//!
//! One structured document per network: a manifest line per layer followed
//! by its parameter arrays, each value printed with 17 significant digits so
//! save -> load round-trips bit-exactly.

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::nn::{BatchNormLayer, Layer, LinearLayer, Network};

const HEADER: &str = "ttalab-checkpoint v1";

/// Serialize a network into the checkpoint document.
pub fn save_checkpoint(net: &Network) -> String {
    let mut doc = String::new();
    doc.push_str(HEADER);
    doc.push('\n');
    doc.push_str(&format!("input_dim {}\n", net.input_dim()));
    doc.push_str(&format!("layers {}\n", net.layers().len()));
    for (k, layer) in net.layers().iter().enumerate() {
        match layer {
            Layer::Linear(lin) => {
                doc.push_str(&format!("layer {} linear {} {}\n", k, lin.in_dim(), lin.out_dim()));
                push_array(&mut doc, "w", lin.weight.as_slice());
                push_array(&mut doc, "b", lin.bias.as_slice());
            }
            Layer::Relu => {
                doc.push_str(&format!("layer {} relu\n", k));
            }
            Layer::BatchNorm(bn) => {
                doc.push_str(&format!("layer {} batchnorm {}\n", k, bn.channels()));
                doc.push_str(&format!("eps {:.16e}\n", bn.eps));
                push_array(&mut doc, "gamma", bn.gamma.as_slice());
                push_array(&mut doc, "beta", bn.beta.as_slice());
                push_array(&mut doc, "mu_s", bn.mu_s.as_slice());
                push_array(&mut doc, "sigma2_s", bn.sigma2_s.as_slice());
            }
        }
    }
    doc
}

fn push_array(doc: &mut String, name: &str, values: &[f64]) {
    doc.push_str(name);
    for v in values {
        doc.push_str(&format!(" {:.16e}", v));
    }
    doc.push('\n');
}

/// Parse a checkpoint document back into a network.
pub fn load_checkpoint(doc: &str) -> Result<Network> {
    let mut lines = doc.lines();
    let bad = |layer: usize, detail: String| Error::Checkpoint { layer, detail };

    let header = lines.next().unwrap_or("");
    if header.trim() != HEADER {
        return Err(bad(0, format!("unrecognized header {:?}", header)));
    }
    let input_dim = parse_kv(lines.next(), "input_dim", 0)?;
    let n_layers = parse_kv(lines.next(), "layers", 0)?;

    let mut layers = Vec::with_capacity(n_layers);
    for k in 0..n_layers {
        let line = lines
            .next()
            .ok_or_else(|| bad(k, "unexpected end of document: layer manifest missing".into()))?;
        let mut toks = line.split_whitespace();
        match (toks.next(), toks.next()) {
            (Some("layer"), Some(idx)) if idx == k.to_string() => {}
            _ => return Err(bad(k, format!("expected `layer {}`, got {:?}", k, line))),
        }
        match toks.next() {
            Some("linear") => {
                let din: usize = parse_tok(toks.next(), k, "linear input dim")?;
                let dout: usize = parse_tok(toks.next(), k, "linear output dim")?;
                let w = parse_array(lines.next(), "w", din * dout, k)?;
                let b = parse_array(lines.next(), "b", dout, k)?;
                layers.push(Layer::Linear(LinearLayer {
                    weight: Tensor::from_parts(vec![din, dout], w),
                    bias: Tensor::from_parts(vec![dout], b),
                }));
            }
            Some("relu") => layers.push(Layer::Relu),
            Some("batchnorm") => {
                let c: usize = parse_tok(toks.next(), k, "batchnorm channels")?;
                let eps_line = lines
                    .next()
                    .ok_or_else(|| bad(k, "unexpected end of document: eps missing".into()))?;
                let eps: f64 = eps_line
                    .strip_prefix("eps ")
                    .and_then(|v| v.trim().parse().ok())
                    .ok_or_else(|| bad(k, format!("malformed eps line {:?}", eps_line)))?;
                let gamma = parse_array(lines.next(), "gamma", c, k)?;
                let beta = parse_array(lines.next(), "beta", c, k)?;
                let mu_s = parse_array(lines.next(), "mu_s", c, k)?;
                let sigma2_s = parse_array(lines.next(), "sigma2_s", c, k)?;
                layers.push(Layer::BatchNorm(BatchNormLayer {
                    gamma: Tensor::from_parts(vec![c], gamma),
                    beta: Tensor::from_parts(vec![c], beta),
                    mu_s: Tensor::from_parts(vec![c], mu_s),
                    sigma2_s: Tensor::from_parts(vec![c], sigma2_s),
                    eps,
                    layer_index: 0,
                }));
            }
            other => return Err(bad(k, format!("unknown layer kind {:?}", other))),
        }
    }
    Network::new(input_dim, layers)
}

pub fn save_to_path(net: &Network, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, save_checkpoint(net))?;
    Ok(())
}

pub fn load_from_path(path: &std::path::Path) -> Result<Network> {
    let doc = std::fs::read_to_string(path)?;
    load_checkpoint(&doc)
}

fn parse_kv(line: Option<&str>, key: &str, layer: usize) -> Result<usize> {
    let line = line.ok_or(Error::Checkpoint {
        layer,
        detail: format!("unexpected end of document: {} missing", key),
    })?;
    line.strip_prefix(key)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or(Error::Checkpoint { layer, detail: format!("malformed {} line {:?}", key, line) })
}

fn parse_tok<T: std::str::FromStr>(tok: Option<&str>, layer: usize, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or(Error::Checkpoint { layer, detail: format!("missing or malformed {}", what) })
}

fn parse_array(line: Option<&str>, name: &str, expect: usize, layer: usize) -> Result<Vec<f64>> {
    let line = line.ok_or(Error::Checkpoint {
        layer,
        detail: format!("unexpected end of document: array {} missing", name),
    })?;
    let mut toks = line.split_whitespace();
    if toks.next() != Some(name) {
        return Err(Error::Checkpoint {
            layer,
            detail: format!("expected array {}, got {:?}", name, line),
        });
    }
    let values: Vec<f64> = toks.map(|t| t.parse()).collect::<std::result::Result<_, _>>().map_err(
        |e| Error::Checkpoint { layer, detail: format!("bad value in {}: {}", name, e) },
    )?;
    if values.len() != expect {
        return Err(Error::Checkpoint {
            layer,
            detail: format!("array {} has {} values, expected {}", name, values.len(), expect),
        });
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::BnMode;
    use crate::numeric::Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = Rng::new(13);
        let mut net = Network::mlp(5, &[6, 4], 3, &mut rng);
        for layer in net.layers_mut() {
            if let Layer::BatchNorm(bn) = layer {
                let c = bn.channels();
                bn.mu_s =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.next_normal()).collect());
                bn.sigma2_s =
                    Tensor::from_parts(vec![c], (0..c).map(|_| rng.range_f64(0.1, 3.0)).collect());
            }
        }
        let doc = save_checkpoint(&net);
        let restored = load_checkpoint(&doc).unwrap();
        assert_eq!(save_checkpoint(&restored), doc);

        // Logits agree exactly.
        let x = Tensor::from_parts(vec![4, 5], (0..20).map(|_| rng.next_f64()).collect());
        let (a, _) = net.forward(&x, BnMode::TestStats).unwrap();
        let (b, _) = restored.forward(&x, BnMode::TestStats).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
    }

    #[test]
    fn truncated_document_names_the_layer() {
        let mut rng = Rng::new(14);
        let net = Network::mlp(3, &[4], 2, &mut rng);
        let doc = save_checkpoint(&net);
        // Drop everything from the second layer's manifest onward.
        let cut = doc.lines().take(6).collect::<Vec<_>>().join("\n");
        match load_checkpoint(&cut) {
            Err(Error::Checkpoint { layer, .. }) => assert_eq!(layer, 1),
            other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn garbage_header_is_rejected() {
        assert!(load_checkpoint("not a checkpoint").is_err());
    }
}
