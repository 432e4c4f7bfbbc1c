use std::io::Write;

use precise_dmi::finetune::MetaboliteMaps;
use precise_dmi::io::{map_range, write_grid, write_pgm, GridFile};
use precise_dmi::metrics::ErrorMaps;
use precise_dmi::Dims;

use crate::manifest::Manifest;
use crate::CliError;

pub type Channel = (String, Vec<Option<f64>>);

pub fn map_channels(maps: &MetaboliteMaps, names: &[String]) -> Vec<Channel> {
    let mut ch = Vec::new();
    for (m, name) in names.iter().enumerate() {
        ch.push((format!("{name}_amplitude"), maps.amplitudes[m].clone()));
    }
    for (m, name) in names.iter().enumerate().skip(1) {
        ch.push((format!("{name}_ratio"), maps.ratios[m].clone()));
    }
    let present = &maps.amplitudes[0];
    ch.push((
        "unreliable".into(),
        maps.unreliable
            .iter()
            .zip(present)
            .map(|(&u, p)| p.map(|_| if u { 1.0 } else { 0.0 }))
            .collect(),
    ));
    ch
}

pub fn error_channels(maps: &ErrorMaps, names: &[String]) -> Vec<Channel> {
    let mut ch = Vec::new();
    for (m, name) in names.iter().enumerate() {
        ch.push((format!("{name}_bias"), maps.bias[m].clone()));
        ch.push((format!("{name}_sd"), maps.sd[m].clone()));
    }
    ch
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `<stem>.grid`, `<stem>.csv` and one PGM per slice of each channel in
/// `render`.
pub fn write_maps(
    man: &mut Manifest,
    stem: &str,
    dims: Dims,
    channels: Vec<Channel>,
    render: &[&str],
) -> Result<(), CliError> {
    let grid = GridFile { dims, channels };
    let mut f = man.create(&format!("{stem}.grid"))?;
    write_grid(&mut f, &grid)?;
    f.flush()?;

    let mut w = csv::Writer::from_writer(man.create(&format!("{stem}.csv"))?);
    let mut header = vec!["x".to_string(), "y".into(), "z".into()];
    header.extend(grid.channels.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    for i in 0..dims.len() {
        if grid.channels.iter().all(|(_, v)| v[i].is_none()) {
            continue;
        }
        let (x, y, z) = dims.coords(i);
        let mut row = vec![x.to_string(), y.to_string(), z.to_string()];
        row.extend(grid.channels.iter().map(|(_, v)| fmt(v[i])));
        w.write_record(&row)?;
    }
    w.flush()?;

    for name in render {
        let Some(map) = grid.channel(name) else { continue };
        let range = map_range(map);
        for z in 0..dims.nz {
            let file = if dims.nz > 1 {
                format!("{stem}_{name}_z{z}.pgm")
            } else {
                format!("{stem}_{name}.pgm")
            };
            let mut f = man.create(&file)?;
            write_pgm(&mut f, map, dims, z, range)?;
            f.flush()?;
        }
    }
    Ok(())
}
