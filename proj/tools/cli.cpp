#include "cli.hpp"

#include <algorithm>
#include <functional>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "spre/checkpoint.hpp"
#include "spre/error.hpp"
#include "spre/model.hpp"
#include "spre/report.hpp"
#include "spre/reparam.hpp"
#include "spre/trainer.hpp"

namespace spre::cli {

namespace {

using nlohmann::ordered_json;

bool has_prefix(const std::string& name, const std::string& layer) {
  return name.size() > layer.size() && name.compare(0, layer.size(), layer) == 0 &&
         name[layer.size()] == '.';
}

// Copies `in`, replacing every entry of each layer in `layers` by whatever
// `emit` writes for that layer, at the position of the layer's first entry.
Checkpoint rewrite_layers(
    const Checkpoint& in, const std::vector<std::string>& layers,
    const std::function<void(Checkpoint&, const std::string&)>& emit) {
  Checkpoint out;
  std::set<std::string> done;
  for (const auto& entry : in.entries()) {
    auto it = std::find_if(layers.begin(), layers.end(), [&](const std::string& l) {
      return has_prefix(entry.name, l);
    });
    if (it == layers.end()) {
      out.put(entry);
      continue;
    }
    if (done.insert(*it).second) emit(out, *it);
  }
  return out;
}

std::vector<std::string> require_blocks(const Checkpoint& ckpt, const std::string& path) {
  auto layers = block_layer_names(ckpt);
  if (layers.empty()) {
    throw Error(ErrorCode::kMissingEntry, path + ": no two-branch layers (*.w_main)");
  }
  return layers;
}

template <typename T>
Checkpoint project_checkpoint(const Checkpoint& in, const NMPattern& pattern,
                              const std::string& path) {
  const auto layers = block_layer_names(in);
  Checkpoint out = rewrite_layers(in, layers, [&](Checkpoint& ckpt, const std::string& l) {
    auto block = load_block<T>(in, l);
    block.pattern = pattern;
    block.rule = MainMaskRule::kNM;
    recompute_masks(block);
    block.check_invariants();
    save_block(ckpt, block);
  });
  std::size_t projected = layers.size();
  for (const auto& entry : in.entries()) {
    const bool owned = std::any_of(layers.begin(), layers.end(), [&](const std::string& l) {
      return has_prefix(entry.name, l);
    });
    if (owned || entry.dtype == DType::kMask || entry.dims.size() != 4) continue;
    if (entry.name == "stem.w" || entry.name.ends_with(".w_bar")) continue;
    if (entry.dims[1] % pattern.m() != 0) continue;
    out.put_mask(entry.name + ".mask", nm_project(in.get_tensor<T>(entry.name),
                                                  pattern, entry.name));
    ++projected;
  }
  if (projected == 0) {
    throw Error(ErrorCode::kMissingEntry, path + ": no eligible conv weights");
  }
  return out;
}

template <typename T>
Checkpoint spre_build_checkpoint(const Checkpoint& in, const NMPattern& pattern,
                                 SpReVariant variant, std::uint64_t seed,
                                 double extra_bn_gamma, const std::string& path) {
  const auto layers = require_blocks(in, path);
  std::mt19937_64 rng(seed);
  return rewrite_layers(in, layers, [&](Checkpoint& ckpt, const std::string& l) {
    const auto old = load_block<T>(in, l);
    SpReBlockOptions opts;
    opts.pattern = pattern;
    opts.spec = old.spec;
    opts.variant = variant;
    opts.rule = MainMaskRule::kNM;
    opts.schedule = MaskSchedule::kFrozen;
    opts.extra_bn_gamma = extra_bn_gamma;
    auto block = make_spre_block(l, old.w_main, opts, rng);
    block.bn_main = old.bn_main;
    save_block(ckpt, block);
  });
}

template <typename T>
Checkpoint reparam_checkpoint(const Checkpoint& in, const std::string& path) {
  const auto layers = require_blocks(in, path);
  return rewrite_layers(in, layers, [&](Checkpoint& ckpt, const std::string& l) {
    save_merged(ckpt, merge_branches(load_block<T>(in, l)));
  });
}

template <typename T>
ordered_json verify_checkpoints(const Checkpoint& two_branch, const Checkpoint& merged,
                                const EquivalenceOptions& options,
                                const std::string& path) {
  const auto layers = require_blocks(two_branch, path);
  ordered_json per_layer = ordered_json::array();
  double max_diff = 0.0;
  bool passed = true;
  for (const auto& l : layers) {
    if (!merged.contains(l + ".w_bar")) {
      throw Error(ErrorCode::kMissingEntry, "merged checkpoint has no layer '" + l + "'");
    }
    const auto block = load_block<T>(two_branch, l);
    const auto conv = load_merged<T>(merged, l);
    const auto r = verify_equivalence(block, conv, options);
    max_diff = std::max(max_diff, r.max_abs_diff);
    passed = passed && r.passed;
    per_layer.push_back({{"layer", l}, {"max_abs_diff", r.max_abs_diff}, {"passed", r.passed}});
  }
  ordered_json report;
  report["trials"] = options.trials;
  report["max_abs_diff"] = max_diff;
  report["tolerance"] = options.tolerance;
  report["passed"] = passed;
  report["layers"] = std::move(per_layer);
  return report;
}

template <typename T>
double evaluate_checkpoint(const Checkpoint& ckpt, const Dataset& data) {
  if (!block_layer_names(ckpt).empty()) {
    return evaluate(model_from_checkpoint<T>(ckpt), data);
  }
  return evaluate(merged_from_checkpoint<T>(ckpt), data);
}

template <typename F>
auto by_precision(const Checkpoint& ckpt, F&& f) {
  if (checkpoint_precision(ckpt) == DType::kF64) return f(double{});
  return f(float{});
}

void print_error(std::ostream& err, std::string_view code, std::string_view message) {
  ordered_json j;
  j["error"] = code;
  j["message"] = message;
  err << j.dump() << '\n';
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"N:M sparse training with spatial re-parameterization"};
  app.require_subcommand(1);
  int status = 0;

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "train a model from a JSON config");
  train_cmd->add_option("--config", config_path, "JSON config")->required();

  std::string ckpt_path, out_path;
  auto* profile_cmd = app.add_subcommand("profile", "spatial sparsity CSV of every mask");
  profile_cmd->add_option("ckpt", ckpt_path)->required();
  profile_cmd->add_option("--out", out_path, "CSV output")->required();

  std::size_t n = 0, m = 0;
  auto* project_cmd = app.add_subcommand("project", "N:M-project every eligible conv weight");
  project_cmd->add_option("ckpt", ckpt_path)->required();
  project_cmd->add_option("--n", n)->required();
  project_cmd->add_option("--m", m)->required();
  project_cmd->add_option("--out", out_path)->required();

  std::string variant = "spre";
  std::uint64_t seed = 0;
  auto* build_cmd = app.add_subcommand(
      "spre-build", "build frozen two-branch blocks from pre-trained weights");
  build_cmd->add_option("ckpt", ckpt_path)->required();
  build_cmd->add_option("--n", n)->required();
  build_cmd->add_option("--m", m)->required();
  build_cmd->add_option("--variant", variant)
      ->check(CLI::IsMember({"spre", "same", "inverse", "none"}));
  build_cmd->add_option("--seed", seed, "extra-branch initialization seed");
  double extra_bn_gamma = 0.0;
  build_cmd->add_option("--extra-bn-gamma", extra_bn_gamma, "initial extra-branch BN scale");
  build_cmd->add_option("--out", out_path)->required();

  auto* reparam_cmd = app.add_subcommand("reparam", "merge every two-branch layer");
  reparam_cmd->add_option("ckpt", ckpt_path)->required();
  reparam_cmd->add_option("--out", out_path)->required();

  std::string merged_path;
  EquivalenceOptions eq;
  auto* verify_cmd = app.add_subcommand(
      "verify", "compare two-branch and merged layers on random inputs");
  verify_cmd->add_option("two_branch", ckpt_path)->required();
  verify_cmd->add_option("merged", merged_path)->required();
  verify_cmd->add_option("--trials", eq.trials);
  verify_cmd->add_option("--tol", eq.tolerance);
  verify_cmd->add_option("--seed", eq.seed);

  auto* eval_cmd = app.add_subcommand(
      "evaluate", "validation accuracy of a two-branch or merged checkpoint");
  eval_cmd->add_option("ckpt", ckpt_path)->required();
  eval_cmd->add_option("--config", config_path, "JSON config naming the dataset")
      ->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);

    if (*train_cmd) {
      const auto config = load_train_config(config_path);
      const auto metrics = train(config);
      ordered_json j;
      j["final_accuracy"] = metrics.final_accuracy;
      j["epochs"] = metrics.epochs.empty() ? 0 : metrics.epochs.back().epoch;
      j["steps"] = metrics.steps;
      j["mask_checks"] = metrics.mask_checks;
      j["mask_violations"] = metrics.mask_violations;
      out << j.dump() << '\n';
    } else if (*profile_cmd) {
      const auto ckpt = load_checkpoint(ckpt_path);
      std::vector<SparsityProfile> profiles;
      for (const auto& e : ckpt.entries()) {
        if (e.dtype == DType::kMask && e.dims.size() == 4) {
          profiles.push_back(spatial_sparsity(ckpt.get_mask(e.name), e.name));
        }
      }
      if (profiles.empty()) {
        throw Error(ErrorCode::kMissingEntry, ckpt_path + ": no masks to profile");
      }
      write_file_atomic(out_path, profiles_to_csv(profiles));
    } else if (*project_cmd) {
      const NMPattern pattern(n, m);
      const auto ckpt = load_checkpoint(ckpt_path);
      save_checkpoint(out_path, by_precision(ckpt, [&](auto t) {
                        return project_checkpoint<decltype(t)>(ckpt, pattern, ckpt_path);
                      }));
    } else if (*build_cmd) {
      const NMPattern pattern(n, m);
      const auto v = parse_variant(variant);
      const auto ckpt = load_checkpoint(ckpt_path);
      save_checkpoint(out_path, by_precision(ckpt, [&](auto t) {
                        return spre_build_checkpoint<decltype(t)>(ckpt, pattern, v, seed,
                                                                  extra_bn_gamma, ckpt_path);
                      }));
    } else if (*reparam_cmd) {
      const auto ckpt = load_checkpoint(ckpt_path);
      save_checkpoint(out_path, by_precision(ckpt, [&](auto t) {
                        return reparam_checkpoint<decltype(t)>(ckpt, ckpt_path);
                      }));
    } else if (*verify_cmd) {
      if (!(eq.tolerance >= 0)) {
        throw Error(ErrorCode::kInvalidArgument, "--tol must be >= 0");
      }
      const auto two = load_checkpoint(ckpt_path);
      const auto merged = load_checkpoint(merged_path);
      const auto report = by_precision(two, [&](auto t) {
        return verify_checkpoints<decltype(t)>(two, merged, eq, ckpt_path);
      });
      out << report.dump() << '\n';
      status = report["passed"].get<bool>() ? 0 : 1;
    } else if (*eval_cmd) {
      const auto config = load_train_config(config_path);
      const auto data = load_data(config.data);
      const auto ckpt = load_checkpoint(ckpt_path);
      const double acc = by_precision(ckpt, [&](auto t) {
        return evaluate_checkpoint<decltype(t)>(ckpt, data.val);
      });
      ordered_json j;
      j["accuracy"] = acc;
      j["samples"] = data.val.size();
      out << j.dump() << '\n';
    }
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", e.what());
    return 2;
  } catch (const Error& e) {
    print_error(err, error_code_name(e.code()), e.what());
    return 2;
  } catch (const std::exception& e) {
    print_error(err, "internal", e.what());
    return 2;
  }
  return status;
}

}  // namespace spre::cli
