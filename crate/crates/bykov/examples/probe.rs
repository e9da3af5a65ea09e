use bykov::scanner::*;
use bykov::model::ModelParams;
use std::time::Instant;
fn main() {
    let base = ModelParams::reference(0.0, 0.0);
    let opts = ScanOptions::default();
    let hom_w_arc = vec![
        TonguePoint { kind: HomKind::W, lambda1: 0.02601, lambda2: 0.003262, residual: 0.0 },
        TonguePoint { kind: HomKind::W, lambda1: 0.02201, lambda2: 0.003052, residual: 0.0 },
    ];
    let hom_v_arc = vec![
        TonguePoint { kind: HomKind::V, lambda1: 0.0255, lambda2: 0.0031, residual: 0.0 },
        TonguePoint { kind: HomKind::V, lambda1: 0.0225, lambda2: 0.0032, residual: 0.0 },
    ];
    let t0 = Instant::now();
    match find_codim2_points(&base, &[hom_v_arc], &[hom_w_arc], &opts) {
        Ok(pts) if !pts.is_empty() => {
            for pt in &pts {
                println!("codim2 ({:.7}, {:.7}) res {:.2e} [{:?}]", pt.lambda1, pt.lambda2, pt.residual, t0.elapsed());
                let p = ModelParams::reference(pt.lambda1, pt.lambda2);
                match extract_homoclinic_loops(&p, &opts) {
                    Ok(loops) => {
                        println!("  loops v={} w={}", loops.loop_v.len(), loops.loop_w.len());
                        match loops_linking_number(&loops) {
                            Ok(lk) => println!("  linking = {lk}"),
                            Err(e) => println!("  linking err: {e}"),
                        }
                    }
                    Err(e) => println!("  extraction err: {e}"),
                }
            }
        }
        Ok(_) => println!("no codim-2 found"),
        Err(e) => println!("err: {e}"),
    }
}
