fn main() {
    use flowsyn::joint::{GaussianEmissions, JointModel, SyntaxParams};
    use flowsyn::markov::MarkovParams;
    use flowsyn::matrix::Mat;
    use flowsyn::{Flow, Real};
    let k = 2; let d = 2;
    let mut means = Mat::zeros(k, d);
    means.set(0, 0, -6.0);
    means.set(1, 0, 6.0);
    let model: JointModel<Real> = JointModel {
        flow: Flow::identity(d),
        emissions: GaussianEmissions::new(means, Mat::filled(k, d, 1.0), false).unwrap(),
        syntax: SyntaxParams::Markov(MarkovParams::init(k, 17)),
    };
    println!("{}", serde_json::json!({ "model": model, "min_len": 2, "max_len": 6 }));
}
