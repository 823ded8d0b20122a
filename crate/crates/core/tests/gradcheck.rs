use podq::tensor::gradcheck::{check_op, CheckedOp};

#[test]
fn analytic_gradients_match_central_differences() {
    for op in CheckedOp::ALL {
        let r = check_op(op, 100, 1e-3, 2024).unwrap();
        println!("{:<14} worst {:.2e} mean {:.2e}", op.id(), r.worst, r.mean);
        assert!(
            r.worst < 1e-3,
            "{}: worst relative error {}",
            op.id(),
            r.worst
        );
    }
}
