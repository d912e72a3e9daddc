// Minimal library walk-through: synthetic data -> split -> autoencoder ->
// Mahalanobis threshold -> evaluation on the held-out test set.

#include <cstdio>

#include "aeromon/aeromon.hpp"

int main() {
  using namespace aeromon;

  SynthConfig synth;
  synth.n_samples = 5000;
  const Dataset data = generate_synthetic(synth);
  const SplitResult parts = split(data, 0.10, 0.10, 11);

  const MinMaxScaler scaler = fit_scaler(parts.ae_train);
  TrainConfig tc;
  tc.batch_size = 128;
  tc.max_epochs = 60;
  const auto trained = train(init_network(autoencoder_topology(), 3), to_matrix(apply_scaler(scaler, parts.ae_train)),
                             to_matrix(apply_scaler(scaler, parts.ae_val)), tc);
  std::printf("trained %zu epochs, best val MSE %.3g\n", trained.report.epochs_run, trained.report.best_val_loss);

  const AnomalyScorer scorer = calibrate(trained.net, scaler, parts.ae_train, {ThresholdKind::MahalanobisPercentile, 85.0});
  const EvalReport r = evaluate_model("autoencoder", [&](const Features& x) { return classify(scorer, x); }, parts.test);
  std::printf("precision %.4f recall %.4f f1 %.4f accuracy %.4f\n", r.metrics.precision, r.metrics.recall, r.metrics.f1,
              r.metrics.accuracy);
  return 0;
}
