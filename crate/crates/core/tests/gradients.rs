use mpfgvc_core::gradcheck::{check_block, check_op, check_stage1, check_stage2, run_suite, TOLERANCE};
use mpfgvc_tensor::Var;

#[test]
fn suite_covers_every_op_and_both_stages() {
    let reports = run_suite(2).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.name.as_str()).collect();
    for op in [
        "matmul",
        "bmm",
        "softmax",
        "layer_norm",
        "gelu",
        "gather_rows",
        "cross_entropy",
        "l2_normalize",
        "loss_i2t_pairs",
        "loss_t2i_pairs",
        "loss_i2t_class",
        "transformer_block",
        "stage1_end_to_end",
        "stage2_end_to_end",
    ] {
        assert!(names.contains(&op), "missing {op}");
    }
    for r in &reports {
        assert_eq!(r.seeds, 2);
        assert!(r.passed(), "{} rel err {:.3e}", r.name, r.max_rel_err);
    }
}

#[test]
fn end_to_end_checks_on_fresh_seeds() {
    for seed in [17, 23] {
        assert!(check_block(seed).unwrap() <= TOLERANCE);
        assert!(check_stage1(seed).unwrap() <= TOLERANCE);
        assert!(check_stage2(seed).unwrap() <= TOLERANCE);
    }
}

#[test]
fn composed_expression_checks() {
    let build = |g: &mut mpfgvc_tensor::Graph<f64>, v: &[Var]| -> mpfgvc_core::Result<Var> {
        let h = g.matmul(v[0], v[1])?;
        let h = g.gelu(h);
        Ok(g.softmax(h)?)
    };
    let r = check_op("matmul_gelu_softmax", &[&[3, 4], &[4, 5]], &build, 3).unwrap();
    assert!(r.passed(), "{:.3e}", r.max_rel_err);
}
