#pragma once

#include <string>
#include <vector>

#include "spre/reparam.hpp"
#include "spre/sparsity.hpp"
#include "spre/trainer.hpp"

namespace spre {

/// `layer,u,v,spatial_sparsity` rows, layers in the given order, then
/// row-major (u, v). Values use the shortest round-trip decimal form.
std::string profiles_to_csv(const std::vector<SparsityProfile>& profiles);

/// One compact JSON object per line.
std::string epoch_record_json(const EpochRecord& record);
std::string metrics_to_jsonl(const RunMetrics& metrics);

std::string equivalence_report_json(const EquivalenceReport& report);

/// Shortest decimal string that parses back to exactly `v`.
std::string format_double(double v);

}  // namespace spre
