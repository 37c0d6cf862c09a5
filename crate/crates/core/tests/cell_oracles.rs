//! Recurrent cells against plain scalar-loop references (64-bit).

#[path = "support/oracles.rs"]
mod oracles;

const TOL: f64 = 1e-10;

#[test]
fn lstm_matches_scalar_reference_for_1000_steps() {
    let d = oracles::lstm_deviation(1000);
    assert!(d <= TOL, "max deviation {d:e}");
}

#[test]
fn gru_matches_scalar_reference_for_1000_steps() {
    let d = oracles::gru_deviation(1000);
    assert!(d <= TOL, "max deviation {d:e}");
}

#[test]
fn vanilla_rnn_matches_scalar_reference() {
    let d = oracles::rnn_deviation(200);
    assert!(d <= TOL, "max deviation {d:e}");
}

#[test]
fn zero_parameter_lstm_step_closed_form() {
    // every gate is σ(0) = 1/2, candidate tanh(0) = 0: c = 1/2, h = tanh(1/2)/2
    let (h, c) = oracles::zero_lstm_step();
    assert!((c - 0.5).abs() < 1e-15);
    assert!((h - 0.5f64.tanh() / 2.0).abs() < 1e-15);
    assert!((h - 0.23106).abs() < 1e-5);
}
