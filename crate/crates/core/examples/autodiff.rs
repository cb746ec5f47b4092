//! Records a small computation on a tape, backpropagates through it and
//! compares the result with central differences.
//!
//! ```bash
//! cargo run --example autodiff
//! ```

use soenet::diffcore::{check_tape, grad_check_report, Array, Tape, FD_STEP};

fn main() -> soenet::Result<()> {
    let mut tape = Tape::<f64>::new();
    let x = tape.input("x", Array::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 1.5, 0.25, -0.75])?)?;
    let w = tape.param("w", Array::from_f64(&[3, 2], &[0.1, 0.2, -0.3, 0.4, 0.5, -0.6])?)?;
    let b = tape.param("b", Array::from_f64(&[2], &[0.05, -0.05])?)?;

    let h = tape.matmul(x, w)?;
    let h = tape.add_bias(h, b)?;
    let h = tape.relu(h)?;
    let p = tape.softmax_rows(h)?;
    let loss = tape.sum(p)?;
    let probs = tape.value(p);
    println!("softmax rows: {:?}", probs.data());

    let grads = tape.backward(loss)?;
    println!("dL/dw = {:?}", grads.param("w").unwrap().data());
    println!("dL/db = {:?}", grads.param("b").unwrap().data());

    // replay with a different input, same recorded graph
    let mut inputs = std::collections::BTreeMap::new();
    inputs.insert("x".to_string(), Array::from_f64(&[2, 3], &[1.0; 6])?);
    let replay = tape.forward_eval(&inputs, &[loss])?;
    println!("loss at x = 1: {}", replay[0].data()[0]);

    println!("worst relative error on this tape: {:.2e}", check_tape(&tape, loss, FD_STEP)?);

    let report = grad_check_report(5, 0)?;
    print!("{}", report.to_text(1e-4));
    Ok(())
}
