#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "caml/world.hpp"

namespace caml::metrics {

// Recall of BRAKE over ground-truth BRAKE episodes. Raises a Metric error
// when the evaluation set has no BRAKE case (never silently 0).
double adr(std::span<const world::ActionLabel> predictions,
           std::span<const world::ActionLabel> expert);

// Exact-match rate against expert actions; Metric error on empty input.
double eir(std::span<const world::ActionLabel> predictions,
           std::span<const world::ActionLabel> expert);

// BRAKE predictions on ground-truth GO episodes over GO episodes; reported
// alongside ADR so an always-brake policy is visible. 0 when there are no
// GO episodes.
double false_alarm_rate(std::span<const world::ActionLabel> predictions,
                        std::span<const world::ActionLabel> expert);

struct ConfusionCounts {
  long long true_brake_pred_brake = 0;
  long long true_brake_pred_go = 0;
  long long true_go_pred_brake = 0;
  long long true_go_pred_go = 0;
};

ConfusionCounts confusion(std::span<const world::ActionLabel> predictions,
                          std::span<const world::ActionLabel> expert);

// Mean over classes of |pred & gt| / |pred | gt| aggregated over all maps;
// classes absent from both sides are excluded from the mean.
double miou(std::span<const std::vector<std::uint8_t>> pred_maps,
            std::span<const std::vector<std::uint8_t>> label_maps,
            int n_classes);

// (mean, population standard deviation)
std::pair<double, double> mean_std(std::span<const double> values);

}  // namespace caml::metrics
