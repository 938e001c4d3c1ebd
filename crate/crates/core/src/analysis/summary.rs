use serde::{Deserialize, Serialize};

use crate::analysis::params::{count_ids, Convention};
use crate::error::Result;
use crate::network::Network;
use crate::tensor::{Scalar, Shape};

/// One layer of the architecture table. Field names are part of the JSON format.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub index: usize,
    pub op: String,
    pub c_out: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub total_params: usize,
}

/// Layer table for a probe input; parameters use the trainable convention.
pub fn summarize<T: Scalar>(net: &Network<T>, probe: Shape) -> Result<Summary> {
    let rows: Vec<SummaryRow> = net
        .layers(probe)?
        .into_iter()
        .enumerate()
        .map(|(i, l)| SummaryRow {
            index: i + 1,
            op: l.op,
            c_out: l.shape.c,
            h_out: l.shape.h,
            w_out: l.shape.w,
            params: count_ids(net.store(), &l.params, Convention::Trainable),
        })
        .collect();
    let total_params = rows.iter().map(|r| r.params).sum();
    Ok(Summary { rows, total_params })
}

impl Summary {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.op.len()).max().unwrap_or(9).max(9);
        let mut out = format!("{:>3}  {:<width$}  {:>7}  {:>11}  {:>9}\n", "#", "Operation", "Out Ch.", "Out Res.", "Params");
        for r in &self.rows {
            out += &format!(
                "{:>3}  {:<width$}  {:>7}  {:>11}  {:>9}\n",
                r.index,
                r.op,
                r.c_out,
                format!("{} x {}", r.h_out, r.w_out),
                r.params
            );
        }
        out += &format!("total trainable parameters: {}\n", self.total_params);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetworkConfig;

    #[test]
    fn text_and_json_agree() {
        let net = Network::<f32>::new(NetworkConfig::tiny()).unwrap();
        let s = summarize(&net, Shape::new(1, 3, 64, 128)).unwrap();
        let back: Summary = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let text = s.to_text();
        for r in &s.rows {
            let line = text.lines().nth(r.index).unwrap();
            assert!(line.contains(&r.op) && line.contains(&format!("{} x {}", r.h_out, r.w_out)));
            assert!(line.trim_end().ends_with(&r.params.to_string()));
        }
    }
}
