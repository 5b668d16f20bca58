#include "caml/metrics.hpp"

#include <cmath>

#include "caml/errors.hpp"

namespace caml::metrics {

using world::ActionLabel;

namespace {

void check_aligned(std::span<const ActionLabel> a,
                   std::span<const ActionLabel> b) {
  if (a.size() != b.size())
    raise(ErrorKind::Dimension, "prediction/label counts differ");
}

}  // namespace

ConfusionCounts confusion(std::span<const ActionLabel> predictions,
                          std::span<const ActionLabel> expert) {
  check_aligned(predictions, expert);
  ConfusionCounts c;
  for (std::size_t i = 0; i < expert.size(); ++i) {
    bool tb = expert[i] == ActionLabel::Brake;
    bool pb = predictions[i] == ActionLabel::Brake;
    if (tb && pb) ++c.true_brake_pred_brake;
    if (tb && !pb) ++c.true_brake_pred_go;
    if (!tb && pb) ++c.true_go_pred_brake;
    if (!tb && !pb) ++c.true_go_pred_go;
  }
  return c;
}

double adr(std::span<const ActionLabel> predictions,
           std::span<const ActionLabel> expert) {
  ConfusionCounts c = confusion(predictions, expert);
  long long brakes = c.true_brake_pred_brake + c.true_brake_pred_go;
  if (brakes == 0)
    raise(ErrorKind::Metric, "ADR undefined: no ground-truth BRAKE cases");
  return static_cast<double>(c.true_brake_pred_brake) /
         static_cast<double>(brakes);
}

double eir(std::span<const ActionLabel> predictions,
           std::span<const ActionLabel> expert) {
  check_aligned(predictions, expert);
  if (expert.empty())
    raise(ErrorKind::Metric, "EIR undefined on an empty episode set");
  long long match = 0;
  for (std::size_t i = 0; i < expert.size(); ++i)
    if (predictions[i] == expert[i]) ++match;
  return static_cast<double>(match) / static_cast<double>(expert.size());
}

double false_alarm_rate(std::span<const ActionLabel> predictions,
                        std::span<const ActionLabel> expert) {
  ConfusionCounts c = confusion(predictions, expert);
  long long gos = c.true_go_pred_brake + c.true_go_pred_go;
  if (gos == 0) return 0.0;
  return static_cast<double>(c.true_go_pred_brake) / static_cast<double>(gos);
}

double miou(std::span<const std::vector<std::uint8_t>> pred_maps,
            std::span<const std::vector<std::uint8_t>> label_maps,
            int n_classes) {
  if (pred_maps.size() != label_maps.size())
    raise(ErrorKind::Dimension, "prediction/label map counts differ");
  if (pred_maps.empty())
    raise(ErrorKind::Metric, "mIoU undefined on an empty map set");
  std::vector<long long> inter(static_cast<std::size_t>(n_classes), 0);
  std::vector<long long> uni(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t m = 0; m < pred_maps.size(); ++m) {
    const auto& pred = pred_maps[m];
    const auto& gt = label_maps[m];
    if (pred.size() != gt.size())
      raise(ErrorKind::Dimension, "prediction/label map shapes differ");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      int p = pred[i], g = gt[i];
      if (p >= n_classes || g >= n_classes)
        raise(ErrorKind::Label, "class id outside [0, C)");
      if (p == g) {
        ++inter[static_cast<std::size_t>(p)];
        ++uni[static_cast<std::size_t>(p)];
      } else {
        ++uni[static_cast<std::size_t>(p)];
        ++uni[static_cast<std::size_t>(g)];
      }
    }
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (uni[static_cast<std::size_t>(c)] == 0) continue;  // absent from both
    sum += static_cast<double>(inter[static_cast<std::size_t>(c)]) /
           static_cast<double>(uni[static_cast<std::size_t>(c)]);
    ++present;
  }
  if (present == 0)
    raise(ErrorKind::Metric, "mIoU undefined: no class present anywhere");
  return sum / present;
}

std::pair<double, double> mean_std(std::span<const double> values) {
  if (values.empty())
    raise(ErrorKind::Metric, "mean/std of an empty sequence");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());  // population std
  return {mean, std::sqrt(var)};
}

}  // namespace caml::metrics
