//! Pooled-feature export for external visualization.

use std::io::Write;

use crate::episodes::Split;
use crate::error::Result;
use crate::model::AmsfNet;

use super::data::LoadedData;

/// Writes `item_id,patient_id,label,f0..f{d-1}` for the first `count` items
/// of `split` in manifest order; returns the number of rows.
pub fn export_embeddings<W: Write>(net: &AmsfNet, data: &LoadedData, split: Split, count: usize, out: W) -> Result<usize> {
    let d = net.config.d_model;
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["item_id".to_string(), "patient_id".into(), "label".into()];
    header.extend((0..d).map(|j| format!("f{j}")));
    w.write_record(&header)?;
    let idx: Vec<usize> = data.manifest.indices(split).into_iter().take(count).collect();
    for &i in &idx {
        let item = &data.manifest.items[i];
        let feats = net.features(&net.prepare(data.images[i].view())?)?;
        let mut rec = vec![item.item_id.clone(), item.patient_id.clone(), item.class_label.clone()];
        rec.extend(AmsfNet::pooled(&feats).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(idx.len())
}
