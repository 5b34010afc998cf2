#pragma once

// Ablation harness. A variant is a list of config overrides plus the label
// columns it prints under; every (variant, seed) cell pre-trains from scratch
// (or fine-tunes a shared pre-trained model) and is scored by zero-shot
// retrieval on a held-out split. A failing cell is recorded and skipped.

#include <algorithm>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "miles/config.hpp"
#include "miles/errors.hpp"
#include "miles/eval.hpp"
#include "miles/log.hpp"
#include "miles/trainer.hpp"

namespace miles {

struct AblationVariant {
  std::string name;
  std::vector<std::pair<std::string, std::string>> labels;  // column -> cell text
  std::vector<std::string> overrides;                       // dot-path=value
  std::optional<bool> finetune_mvm;  // set: fine-tune a default pre-trained model with MVM on/off
};

enum class AblationAxis { targets, update, masking, finetune_mvm };

inline const char* to_string(AblationAxis a) {
  switch (a) {
    case AblationAxis::targets: return "targets";
    case AblationAxis::update: return "update";
    case AblationAxis::masking: return "masking";
    case AblationAxis::finetune_mvm: return "finetune_mvm";
  }
  return "?";
}

inline AblationAxis parse_ablation_axis(const std::string& s) {
  for (auto a : {AblationAxis::targets, AblationAxis::update, AblationAxis::masking, AblationAxis::finetune_mvm}) {
    if (s == to_string(a)) return a;
  }
  throw ConfigError("unknown ablation axis '" + s + "' (targets, update, masking, finetune_mvm)");
}

namespace detail {

inline std::string percent_label(double r) {
  std::ostringstream os;
  os << static_cast<int>(std::lround(r * 100.0)) << '%';
  return os.str();
}

}  // namespace detail

/// Predeclared variant sets. Masking variants change the multi-frame stage
/// (the last one) and keep the single-frame stage as configured.
inline std::vector<AblationVariant> ablation_variants(AblationAxis axis, const RunConfig& base) {
  std::vector<AblationVariant> out;
  switch (axis) {
    case AblationAxis::targets:
      out.push_back({"none", {{"Targets", "-"}}, {"train.use_mvm=false"}, std::nullopt});
      out.push_back({"pixels", {{"Targets", "Pixels"}}, {"train.use_mvm=true", "train.mvm_target=pixels"}, std::nullopt});
      out.push_back({"aligned_features",
                     {{"Targets", "Aligned features"}},
                     {"train.use_mvm=true", "train.mvm_target=features"},
                     std::nullopt});
      break;
    case AblationAxis::update: {
      const std::vector<std::tuple<SnapshotMode, const char*, const char*>> rows = {
          {SnapshotMode::current_iter, "Current iter", "-"},
          {SnapshotMode::prev_iter, "Previous iter", "no"},
          {SnapshotMode::prev_iter_momentum, "Previous iter", "yes"},
          {SnapshotMode::prev_epoch_plain, "Previous epoch", "no"},
          {SnapshotMode::epoch_ema, "Previous epoch", "yes"},
      };
      for (const auto& [mode, mech, mom] : rows) {
        out.push_back({to_string(mode),
                       {{"Mechanism", mech}, {"Mom", mom}},
                       {"train.use_mvm=true", std::string("train.snapshot_mode=") + to_string(mode)},
                       std::nullopt});
      }
      break;
    }
    case AblationAxis::masking: {
      const std::string stage = "train.stages." + std::to_string(base.train.stages.size() - 1) + ".";
      auto cell = [&](MaskStrategy s, double r, const char* masking, const char* tube) {
        std::ostringstream name;
        name << to_string(s) << '@' << r;
        out.push_back({name.str(),
                       {{"Masking", masking}, {"Ratio", detail::percent_label(r)}, {"Tube", tube}},
                       {"train.use_mvm=true", stage + "mask_strategy=" + to_string(s),
                        stage + "mask_ratio=" + nlohmann::json(r).dump()},
                       std::nullopt});
      };
      for (double r : {0.25, 0.50, 0.65, 0.75, 0.85}) cell(MaskStrategy::frame_wise, r, "Frame", "-");
      for (double r : {0.65, 0.75, 0.85}) cell(MaskStrategy::random_tube, r, "Random", "yes");
      for (double r : {0.65, 0.75, 0.85}) cell(MaskStrategy::block_per_frame, r, "Block", "no");
      for (double r : {0.65, 0.75, 0.85}) cell(MaskStrategy::block_tube, r, "Block", "yes");
      break;
    }
    case AblationAxis::finetune_mvm:
      out.push_back({"finetune_no_mvm", {{"MVM", "no"}}, {}, false});
      out.push_back({"finetune_mvm", {{"MVM", "yes"}}, {}, true});
      break;
  }
  return out;
}

/// Fine-tuning config: the last stage of `cfg` alone, with no warm-up.
inline RunConfig finetune_config(RunConfig cfg) {
  cfg.train.stages = {cfg.train.stages.back()};
  cfg.train.warmup_epochs = 0;
  return cfg;
}

struct CellMetrics {
  double r1 = 0, r5 = 0, r10 = 0, r50 = 0, med_r = 0, mean_r = 0, zero_shot = 0;
};

inline constexpr std::array<const char*, 7> kCellMetricNames = {"R@1", "R@5", "R@10", "R@50", "MedR", "MnR", "ZS"};

inline std::array<double, 7> metric_values(const CellMetrics& m) {
  return {m.r1, m.r5, m.r10, m.r50, m.med_r, m.mean_r, m.zero_shot};
}

inline CellMetrics cell_metrics(const EvalResult& r) {
  return CellMetrics{r.t2v.recall(1), r.t2v.recall(5),  r.t2v.recall(10),       r.t2v.recall(50),
                     r.t2v.med_r,     r.t2v.mean_r,     r.zero_shot.accuracy};
}

struct CellRun {
  std::uint64_t seed = 0;
  bool ok = false;
  CellMetrics metrics;
  std::int64_t tube_masks_checked = 0;
  std::string error;
};

struct AblationRow {
  AblationVariant variant;
  std::vector<CellRun> runs;

  std::vector<CellMetrics> successes() const {
    std::vector<CellMetrics> v;
    for (const auto& r : runs) {
      if (r.ok) v.push_back(r.metrics);
    }
    return v;
  }
};

struct AblationTable {
  std::string axis;
  std::vector<std::string> label_columns;
  std::vector<AblationRow> rows;
};

struct Aggregate {
  double mean = 0, min = 0, max = 0;
};

/// Mean / min / max of metric `k` over the row's successful runs.
inline std::optional<Aggregate> aggregate(const AblationRow& row, std::size_t k) {
  const auto ok = row.successes();
  if (ok.empty()) return std::nullopt;
  Aggregate a{0.0, 1e300, -1e300};
  for (const auto& m : ok) {
    const double v = metric_values(m)[k];
    a.mean += v;
    a.min = std::min(a.min, v);
    a.max = std::max(a.max, v);
  }
  a.mean /= static_cast<double>(ok.size());
  return a;
}

/// Held-out evaluation inputs.
struct EvalSet {
  std::vector<VideoClip> clips;
  CaptionVocab vocab;
  std::vector<std::string> class_captions;
};

struct AblationOptions {
  std::function<void(const AblationVariant&, const CellRun&)> on_cell;
};

/// Trains and scores every (variant, seed) cell. `base` is the config every
/// variant's overrides apply to; `train.seed` is replaced by each seed.
inline AblationTable ablation_run(const std::string& axis, const nlohmann::json& base,
                                  const std::vector<AblationVariant>& variants, const std::vector<std::uint64_t>& seeds,
                                  const TrainData& train, const EvalSet& eval, const AblationOptions& opt = {}) {
  if (variants.size() < 2) throw ContractError("ablation needs at least two variants");
  if (seeds.empty()) throw ContractError("ablation needs at least one seed");
  AblationTable table;
  table.axis = axis;
  for (const auto& v : variants) {
    for (const auto& [col, _] : v.labels) {
      if (std::find(table.label_columns.begin(), table.label_columns.end(), col) == table.label_columns.end()) {
        table.label_columns.push_back(col);
      }
    }
  }
  std::map<std::uint64_t, TrainState> pretrained;  // shared by fine-tuning variants
  for (const auto& v : variants) {
    AblationRow row{v, {}};
    for (std::uint64_t seed : seeds) {
      CellRun run;
      run.seed = seed;
      try {
        nlohmann::json doc = base;
        for (const auto& o : v.overrides) apply_override(doc, o);
        doc["train"]["seed"] = seed;
        RunConfig cfg = run_config_from_json(doc);
        validate(cfg);
        TrainState s;
        if (v.finetune_mvm.has_value()) {
          auto it = pretrained.find(seed);
          if (it == pretrained.end()) {
            it = pretrained.emplace(seed, run_curriculum(cfg, train, init_train_state(cfg))).first;
          }
          s = finetune(it->second, finetune_config(cfg), train, *v.finetune_mvm);
        } else {
          s = run_curriculum(cfg, train, init_train_state(cfg));
        }
        run.metrics = cell_metrics(evaluate(s.model, s.video, s.text, eval.clips, eval.vocab, eval.class_captions,
                                            cfg.eval.frames, cfg.eval.batch_size));
        run.tube_masks_checked = s.tube_masks_checked;
        run.ok = true;
      } catch (const std::exception& e) {
        run.error = e.what();
        log::error("ablation cell " + v.name + " seed " + std::to_string(seed) + " failed: " + e.what());
      }
      if (opt.on_cell) opt.on_cell(v, run);
      row.runs.push_back(std::move(run));
    }
    table.rows.push_back(std::move(row));
  }
  return table;
}

// ---------------------------------------------------------------------------
// Output.

namespace detail {

inline std::string label_of(const AblationVariant& v, const std::string& col) {
  for (const auto& [c, text] : v.labels) {
    if (c == col) return text;
  }
  return "";
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace detail

/// One line per variant: labels, variant name, seed counts, then mean/min/max
/// per metric (empty when every seed failed).
inline std::string ablation_csv(const AblationTable& t) {
  std::ostringstream os;
  for (const auto& c : t.label_columns) os << detail::csv_field(c) << ',';
  os << "variant,seeds,failed";
  for (const char* m : kCellMetricNames) os << ',' << m << "_mean," << m << "_min," << m << "_max";
  os << '\n';
  os << std::setprecision(6);
  for (const auto& row : t.rows) {
    for (const auto& c : t.label_columns) os << detail::csv_field(detail::label_of(row.variant, c)) << ',';
    const std::size_t ok = row.successes().size();
    os << detail::csv_field(row.variant.name) << ',' << row.runs.size() << ',' << row.runs.size() - ok;
    for (std::size_t k = 0; k < kCellMetricNames.size(); ++k) {
      if (const auto a = aggregate(row, k)) {
        os << ',' << a->mean << ',' << a->min << ',' << a->max;
      } else {
        os << ",,,";
      }
    }
    os << '\n';
  }
  return os.str();
}

inline nlohmann::ordered_json ablation_json(const AblationTable& t) {
  nlohmann::ordered_json j;
  j["axis"] = t.axis;
  j["rows"] = nlohmann::ordered_json::array();
  for (const auto& row : t.rows) {
    nlohmann::ordered_json r;
    r["variant"] = row.variant.name;
    nlohmann::ordered_json labels = nlohmann::ordered_json::object();
    for (const auto& [c, text] : row.variant.labels) labels[c] = text;
    r["labels"] = labels;
    r["overrides"] = row.variant.overrides;
    r["runs"] = nlohmann::ordered_json::array();
    for (const auto& run : row.runs) {
      nlohmann::ordered_json x;
      x["seed"] = run.seed;
      x["ok"] = run.ok;
      if (run.ok) {
        const auto vals = metric_values(run.metrics);
        for (std::size_t k = 0; k < vals.size(); ++k) x[kCellMetricNames[k]] = vals[k];
        x["tube_masks_checked"] = run.tube_masks_checked;
      } else {
        x["error"] = run.error;
      }
      r["runs"].push_back(x);
    }
    for (std::size_t k = 0; k < kCellMetricNames.size(); ++k) {
      if (const auto a = aggregate(row, k)) {
        r["summary"][kCellMetricNames[k]] = {{"mean", a->mean}, {"min", a->min}, {"max", a->max}};
      }
    }
    j["rows"].push_back(r);
  }
  return j;
}

/// Fixed-width table of means with the [min, max] range of R@1.
inline std::string ablation_text(const AblationTable& t) {
  std::vector<std::size_t> widths;
  for (const auto& c : t.label_columns) {
    std::size_t w = c.size();
    for (const auto& row : t.rows) w = std::max(w, detail::label_of(row.variant, c).size());
    widths.push_back(w + 2);
  }
  std::ostringstream os;
  for (std::size_t i = 0; i < t.label_columns.size(); ++i) os << std::left << std::setw(static_cast<int>(widths[i])) << t.label_columns[i];
  os << std::right;
  for (const char* m : kCellMetricNames) os << std::setw(8) << m;
  os << std::setw(18) << "R@1 range" << std::setw(7) << "ok" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& row : t.rows) {
    for (std::size_t i = 0; i < t.label_columns.size(); ++i) {
      os << std::left << std::setw(static_cast<int>(widths[i])) << detail::label_of(row.variant, t.label_columns[i]);
    }
    os << std::right;
    for (std::size_t k = 0; k < kCellMetricNames.size(); ++k) {
      const auto a = aggregate(row, k);
      if (a) {
        os << std::setw(8) << a->mean;
      } else {
        os << std::setw(8) << "-";
      }
    }
    const auto r1 = aggregate(row, 0);
    std::ostringstream range;
    range << std::fixed << std::setprecision(2);
    if (r1) range << '[' << r1->min << ", " << r1->max << ']';
    os << std::setw(18) << (r1 ? range.str() : "-");
    os << std::setw(7) << (std::to_string(row.successes().size()) + "/" + std::to_string(row.runs.size())) << '\n';
  }
  return os.str();
}

}  // namespace miles
