//! Shape and parameter reports.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::tensor::Shape;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub shape: Shape,
    /// Largest convolution group count in the stage (1 for ungrouped).
    pub groups: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeReport {
    pub rows: Vec<StageRow>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    pub by_stage: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn stage(&self, name: &str) -> usize {
        self.by_stage
            .iter()
            .find(|(s, _)| s == name)
            .map_or(0, |(_, n)| *n)
    }
}

impl ShapeReport {
    pub fn get(&self, stage: &str) -> Option<Shape> {
        self.rows.iter().find(|r| r.stage == stage).map(|r| r.shape)
    }

    pub fn total_params(&self) -> usize {
        self.rows.iter().map(|r| r.params).sum()
    }

    /// Aligned `stage | output shape | groups | params` table with a total line.
    pub fn to_table(&self) -> String {
        let shapes: Vec<String> = self.rows.iter().map(|r| r.shape.to_string()).collect();
        let w0 = self.rows.iter().map(|r| r.stage.len()).chain([5]).max().unwrap_or(5);
        let w1 = shapes.iter().map(String::len).chain([12]).max().unwrap_or(12);
        let total = self.total_params();
        let w2 = total.to_string().len().max(6);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<w0$} | {:<w1$} | {:>6} | {:>w2$}",
            "stage", "output shape", "groups", "params"
        );
        let _ = writeln!(
            out,
            "{}-+-{}-+-{}-+-{}",
            "-".repeat(w0),
            "-".repeat(w1),
            "-".repeat(6),
            "-".repeat(w2)
        );
        for (r, s) in self.rows.iter().zip(&shapes) {
            let _ = writeln!(
                out,
                "{:<w0$} | {:<w1$} | {:>6} | {:>w2$}",
                r.stage, s, r.groups, r.params
            );
        }
        let _ = writeln!(out, "{:<w0$} | {:<w1$} | {:>6} | {:>w2$}", "total", "", "", total);
        out
    }

    /// JSON array of `{stage, shape, params}` objects.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Array(
            self.rows
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "stage": r.stage,
                        "shape": r.shape.0,
                        "params": r.params,
                    })
                })
                .collect(),
        )
    }
}
