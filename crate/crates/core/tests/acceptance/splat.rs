use std::path::PathBuf;

use driftalign::cloud::PointCloud;
use driftalign::export::{export_splats, rgb_to_sh0, sh0_to_rgb, SH_C0};
use driftalign::ply::VertexTable;
use nalgebra::Vector3;

use crate::Outcome;

type V3 = Vector3<f64>;

const N: usize = 7;
/// Dyadic spacing keeps every coordinate difference exact.
const H: f64 = 1.0 / 64.0;

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden_splats.ply")
}

/// A 7³ lattice with normals along z and colors on the 2⁻¹⁶ grid.
fn lattice() -> PointCloud {
    let mut c = PointCloud::default();
    for i in 0..N {
        for j in 0..N {
            for l in 0..N {
                let k = c.positions.len() as f64;
                c.positions.push(V3::new(i as f64, j as f64, l as f64) * H);
                c.colors.push(V3::new(
                    0.25 + k / 65536.0,
                    1.0 - 3.0 * k / 65536.0,
                    0.5 + 7.0 * k / 65536.0,
                ));
                c.confidences.push(1.0);
                c.frame_ids.push(0);
            }
        }
    }
    c.normals = Some(vec![V3::z(); c.len()]);
    c
}

pub fn criterion() -> Outcome {
    let cloud = lattice();
    let set = export_splats(&cloud, usize::MAX, 10, 0.1, 0).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("splats.ply");
    set.write_ply(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    if std::env::var_os("DRIFTALIGN_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &bytes).unwrap();
    }
    let golden = std::fs::read(golden_path()).unwrap_or_default();
    let matches_golden = !golden.is_empty() && golden == bytes;

    let t = VertexTable::read(&path).unwrap();
    let reparsed = t.len == cloud.len();
    let opacity = t.require("opacity").unwrap().iter().all(|&o| o == 0.1f32 as f64);

    // six face neighbours at H, then four edge neighbours at H√2
    let s = (2.0 * H * H).sqrt();
    let expected = (H + H + H + H + H + H + s + s + s + s) / 10.0;
    let interior: Vec<usize> = (0..cloud.len())
        .filter(|&i| cloud.positions[i].iter().all(|&c| c > 1.5 * H && c < (N as f64 - 2.5) * H))
        .collect();
    let stored = t.require("scale_0").unwrap();
    let scale_exact = interior.len() == 27
        && interior
            .iter()
            .all(|&i| set.splats[i].scale == [expected; 2] && stored[i] == expected as f32 as f64);

    let mut sh_exact = true;
    let dc = ["f_dc_0", "f_dc_1", "f_dc_2"].map(|n| t.require(n).unwrap().to_vec());
    for (i, c) in cloud.colors.iter().enumerate() {
        for a in 0..3 {
            let f = rgb_to_sh0(c[a]);
            sh_exact &= set.splats[i].sh0[a] == f && sh0_to_rgb(f) == c[a] && dc[a][i] == f as f32 as f64;
        }
    }
    sh_exact &= (SH_C0 - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-16;

    Outcome::new(
        "8",
        "splat export",
        matches_golden && reparsed && opacity && scale_exact && sh_exact,
        format!(
            "golden file {}, re-parsed {} splats, opacity 0.1: {opacity}, 10-NN scale {expected:.6} exact on {} interior points: {scale_exact}, SH0 roundtrip bit-exact: {sh_exact}",
            if matches_golden { "matches" } else { "differs" },
            t.len,
            interior.len()
        ),
    )
}
