//! Symbolic shape inference: the layer-disposal table of a configuration,
//! computed without allocating any tensors.

use crate::error::Result;

use super::config::{Fusion, NetworkConfig};

/// One C×H×W shape.
pub type Shape3 = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRow {
    pub name: String,
    pub input: Shape3,
    pub output: Shape3,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeTable {
    pub rows: Vec<ShapeRow>,
}

fn fmt_shape(s: Shape3) -> String {
    format!("{}×{}×{}", s.0, s.1, s.2)
}

impl ShapeTable {
    pub fn row(&self, name: &str) -> Option<&ShapeRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Aligned plain-text rendering, one row per line.
    pub fn render_text(&self) -> String {
        let name_w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0);
        let in_w = self
            .rows
            .iter()
            .map(|r| fmt_shape(r.input).chars().count())
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        for r in &self.rows {
            let inp = fmt_shape(r.input);
            let pad = in_w - inp.chars().count();
            out.push_str(&format!(
                "{:<name_w$}  {}{}  →  {}\n",
                r.name,
                inp,
                " ".repeat(pad),
                fmt_shape(r.output),
            ));
        }
        out
    }

    /// CSV rendering with one header line.
    pub fn render_csv(&self) -> String {
        let mut out = String::from("name,in_channels,in_h,in_w,out_channels,out_h,out_w\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.name, r.input.0, r.input.1, r.input.2, r.output.0, r.output.1, r.output.2
            ));
        }
        out
    }
}

/// Derives every row of the layer table for `config`. Encoder rows describe
/// one path (all paths are shaped identically); decoder rows are shared.
pub fn shape_table(config: &NetworkConfig) -> Result<ShapeTable> {
    config.validate()?;
    let (h, w) = config.input_spatial;
    let depth = config.depth;
    let sp = |level: usize| (h >> level, w >> level);
    let mut rows = Vec::new();

    for l in 0..depth {
        let (lh, lw) = sp(l);
        let name = if l == 0 {
            "Conv Layer 1".to_string()
        } else {
            format!("Layer {}", l + 1)
        };
        rows.push(ShapeRow {
            name,
            input: (config.encoder_in_channels(l), lh, lw),
            output: (config.width(l), lh, lw),
        });
        let (ph, pw) = sp(l + 1);
        rows.push(ShapeRow {
            name: format!("Max-pooling {}", l + 1),
            input: (config.width(l), lh, lw),
            output: (config.width(l), ph, pw),
        });
    }

    let (bh, bw) = sp(depth);
    rows.push(ShapeRow {
        name: "Bridge".to_string(),
        input: (config.bridge_in_channels(), bh, bw),
        output: (config.width(depth), bh, bw),
    });

    for k in 1..=depth {
        let (ih, iw) = sp(depth - k + 1);
        let (oh, ow) = sp(depth - k);
        let cin = config.width(depth - k + 1);
        let cout = config.width(depth - k);
        rows.push(ShapeRow {
            name: format!("Up-sample {k}"),
            input: (cin, ih, iw),
            output: (cout, oh, ow),
        });
        rows.push(ShapeRow {
            name: format!("Layer {}", depth + k),
            input: (cout, oh, ow),
            output: (cout, oh, ow),
        });
    }

    rows.push(ShapeRow {
        name: "Softmax layer".to_string(),
        input: (config.width(0), h, w),
        output: (config.num_classes, h, w),
    });

    Ok(ShapeTable { rows })
}

/// The reference layer-disposal rows for the two four-modality reference
/// configurations, used by golden tests and exposed for documentation.
pub fn reference_rows(fusion: Fusion) -> Vec<(&'static str, Shape3, Shape3)> {
    let enc_in = |late: usize, hyper: usize| match fusion {
        Fusion::Hyperdense => hyper,
        _ => late,
    };
    vec![
        ("Conv Layer 1", (1, 256, 256), (32, 256, 256)),
        ("Max-pooling 1", (32, 256, 256), (32, 128, 128)),
        ("Layer 2", (enc_in(32, 128), 128, 128), (64, 128, 128)),
        ("Max-pooling 2", (64, 128, 128), (64, 64, 64)),
        ("Layer 3", (enc_in(64, 384), 64, 64), (128, 64, 64)),
        ("Max-pooling 3", (128, 64, 64), (128, 32, 32)),
        ("Layer 4", (enc_in(128, 896), 32, 32), (256, 32, 32)),
        ("Max-pooling 4", (256, 32, 32), (256, 16, 16)),
        ("Bridge", (enc_in(1024, 1920), 16, 16), (512, 16, 16)),
        ("Up-sample 1", (512, 16, 16), (256, 32, 32)),
        ("Layer 5", (256, 32, 32), (256, 32, 32)),
        ("Up-sample 2", (256, 32, 32), (128, 64, 64)),
        ("Layer 6", (128, 64, 64), (128, 64, 64)),
        ("Up-sample 3", (128, 64, 64), (64, 128, 128)),
        ("Layer 7", (64, 128, 128), (64, 128, 128)),
        ("Up-sample 4", (64, 128, 128), (32, 256, 256)),
        ("Layer 8", (32, 256, 256), (32, 256, 256)),
        ("Softmax layer", (32, 256, 256), (2, 256, 256)),
    ]
}
