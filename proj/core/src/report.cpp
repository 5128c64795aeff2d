#include "spre/report.hpp"

#include <array>
#include <charconv>

#include <json.hpp>

namespace spre {

std::string format_double(double v) {
  std::array<char, 32> buf{};
  auto [end, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), end);
}

std::string profiles_to_csv(const std::vector<SparsityProfile>& profiles) {
  std::string out = "layer,u,v,spatial_sparsity\n";
  for (const auto& p : profiles) {
    for (std::size_t u = 0; u < p.k_h; ++u) {
      for (std::size_t v = 0; v < p.k_w; ++v) {
        out += p.layer_name + ',' + std::to_string(u) + ',' + std::to_string(v) +
               ',' + format_double(p.at(u, v)) + '\n';
      }
    }
  }
  return out;
}

std::string epoch_record_json(const EpochRecord& r) {
  nlohmann::ordered_json j;
  j["epoch"] = r.epoch;
  j["phase"] = r.phase;
  j["loss"] = r.loss;
  j["train_acc"] = r.train_acc;
  j["val_acc"] = r.val_acc;
  j["lr"] = r.lr;
  j["masks_ok"] = r.masks_ok;
  return j.dump();
}

std::string metrics_to_jsonl(const RunMetrics& metrics) {
  std::string out;
  for (const auto& r : metrics.epochs) out += epoch_record_json(r) + '\n';
  return out;
}

std::string equivalence_report_json(const EquivalenceReport& report) {
  nlohmann::ordered_json j;
  j["trials"] = report.trials;
  j["max_abs_diff"] = report.max_abs_diff;
  j["tolerance"] = report.tolerance;
  j["passed"] = report.passed;
  return j.dump();
}

}  // namespace spre
