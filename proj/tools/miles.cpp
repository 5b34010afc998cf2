// miles: corpus generation, pre-training, fine-tuning, evaluation, ablations
// and the gradient check, as subcommands of one binary.
//
// Exit codes: 0 success, 1 usage/config, 2 data/state/io, 3 numeric failure.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "miles/ablation.hpp"
#include "miles/checkpoint.hpp"
#include "miles/config.hpp"
#include "miles/data.hpp"
#include "miles/errors.hpp"
#include "miles/eval.hpp"
#include "miles/gradcheck.hpp"
#include "miles/log.hpp"
#include "miles/trainer.hpp"

namespace fs = std::filesystem;
using namespace miles;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  long long seed = -1;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("-c,--config", c.config, "JSON run config (defaults fill anything missing)");
  app->add_option("-s,--set", c.overrides, "override a config leaf, e.g. train.tau=0.1")->take_all();
  app->add_option("--seed", c.seed, "sets data.seed and train.seed");
}

RunConfig load_config(const Common& c, std::vector<std::string> extra = {}) {
  std::vector<std::string> ov = c.overrides;
  if (c.seed >= 0) {
    ov.push_back("data.seed=" + std::to_string(c.seed));
    ov.push_back("train.seed=" + std::to_string(c.seed));
  }
  ov.insert(ov.end(), extra.begin(), extra.end());
  return load_run_config(c.config, ov);
}

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p)); }

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
}

struct Corpus {
  CorpusInfo info;
  fs::path dir;
};

Corpus open_corpus(const std::string& dir) {
  if (dir.empty()) throw UsageError("--corpus is required");
  if (!fs::is_directory(dir)) throw DataError("corpus directory " + dir + " does not exist");
  return Corpus{read_corpus_info(dir), dir};
}

// The corpus on disk defines the data section of the run config.
RunConfig bind_corpus(RunConfig cfg, const Corpus& corpus) {
  cfg.data = corpus.info.config;
  validate(cfg);
  return cfg;
}

EvalSet eval_set(const Corpus& corpus, const std::string& split) {
  return EvalSet{load_split(corpus.dir, split), corpus.info.vocab, corpus.info.class_captions};
}

int cmd_generate(const Common& c, const std::string& out, bool force) {
  const RunConfig cfg = load_config(c);
  if (non_empty_dir(out)) {
    if (!force) throw UsageError("output directory " + out + " is not empty (use --force to regenerate)");
    fs::remove_all(out);
  }
  const auto manifests = generate_corpus(cfg.data, out);
  for (const auto& m : manifests) std::cout << m.split << ": " << m.clips.size() << " clips\n";
  std::cout << "manifest: " << (fs::path(out) / "corpus.json").string() << '\n';
  return 0;
}

int cmd_pretrain(const Common& c, const std::string& corpus_dir, const std::string& out, bool resume, bool dry_run,
                 bool no_mvm) {
  const Corpus corpus = open_corpus(corpus_dir);
  std::vector<std::string> extra;
  if (no_mvm) extra.push_back("train.use_mvm=false");
  const RunConfig cfg = bind_corpus(load_config(c, extra), corpus);
  const TrainData data = make_train_data(load_split(corpus.dir, "train"), corpus.info.vocab, cfg.encoder.text_max_len);

  if (dry_run) {
    RunOptions opt;
    opt.max_steps = 1;
    const TrainState s = run_curriculum(cfg, data, init_train_state(cfg), opt);
    std::cout << "dry run ok: " << s.video.size() << " video / " << s.text.size()
              << " text tensors, 1 step, l_vanilla=" << s.history.back().l_vanilla << '\n';
    return 0;
  }
  if (out.empty()) throw UsageError("--out is required");
  RunOptions opt;
  opt.out_dir = out;
  TrainState s;
  if (resume) {
    const fs::path last = fs::path(out) / "checkpoints" / "last.ckpt";
    if (!fs::exists(last)) throw StateError("nothing to resume: " + last.string() + " not found");
    s = resume_curriculum(cfg, data, load_archive(last), opt);
  } else {
    if (non_empty_dir(out)) throw UsageError("output directory " + out + " is not empty (use --resume to continue)");
    s = run_curriculum(cfg, data, init_train_state(cfg), opt);
  }
  const fs::path final_path = fs::path(out) / "final.ckpt";
  save_archive(final_path, make_checkpoint(s, cfg));
  std::cout << final_path.string() << '\n';
  return 0;
}

int cmd_finetune(const Common& c, const std::string& ckpt, const std::string& corpus_dir, const std::string& out,
                 bool mvm) {
  if (out.empty()) throw UsageError("--out is required");
  if (non_empty_dir(out)) throw UsageError("output directory " + out + " is not empty");
  const Corpus corpus = open_corpus(corpus_dir);
  const Archive a = load_archive(ckpt);
  nlohmann::json doc = nlohmann::json(checkpoint_config(a));
  for (const auto& o : c.overrides) apply_override(doc, o);
  if (c.seed >= 0) doc["train"]["seed"] = c.seed;
  RunConfig cfg = finetune_config(bind_corpus(run_config_from_json(doc), corpus));
  cfg.train.use_mvm = mvm;
  const TrainData data = make_train_data(load_split(corpus.dir, "train"), corpus.info.vocab, cfg.encoder.text_max_len);
  RunOptions opt;
  opt.out_dir = out;
  const TrainState s = finetune(state_from_checkpoint(a), cfg, data, mvm, opt);
  const fs::path final_path = fs::path(out) / "final.ckpt";
  save_archive(final_path, make_checkpoint(s, cfg));
  std::cout << final_path.string() << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& corpus_dir, const std::string& mode,
             std::string split, std::string report) {
  const Corpus corpus = open_corpus(corpus_dir);
  const Archive a = load_archive(ckpt);
  RunConfig cfg = checkpoint_config(a);
  if (!c.config.empty()) {
    // The model part of a supplied config must be the one the checkpoint was trained with.
    RunConfig user = load_config(c);
    user.data = cfg.data;
    user.eval = cfg.eval;
    require_same_config(cfg, user);
  } else {
    nlohmann::json doc = nlohmann::json(cfg);
    for (const auto& o : c.overrides) {
      if (o.rfind("eval.", 0) != 0) throw UsageError("eval accepts only eval.* overrides without --config");
      apply_override(doc, o);
    }
    cfg = run_config_from_json(doc);
  }
  const TrainState s = state_from_checkpoint(a);
  const CorpusConfig& d = corpus.info.config;
  if (d.resolution != s.model.image_size || d.channels != s.model.channels || d.patch_size != s.model.patch_size) {
    throw StateError("corpus geometry does not match the checkpoint's model");
  }
  if (split.empty()) split = cfg.eval.split;
  const EvalSet es = eval_set(corpus, split);
  const std::size_t frames = std::min(cfg.eval.frames, d.frames);
  const EvalResult r =
      evaluate(s.model, s.video, s.text, es.clips, es.vocab, es.class_captions, frames, cfg.eval.batch_size);

  nlohmann::ordered_json j;
  j["checkpoint"] = ckpt;
  j["split"] = split;
  j["mode"] = mode;
  j["config"] = nlohmann::ordered_json::parse(nlohmann::json(cfg).dump());
  if (mode == "retrieval") {
    j["t2v"] = to_json_value(r.t2v);
    j["v2t"] = to_json_value(r.v2t);
    std::cout << format_reports({r.t2v, r.v2t});
  } else {
    j["zeroshot"] = to_json_value(r.zero_shot);
    std::cout << "zero-shot accuracy " << r.zero_shot.accuracy << "% over " << r.zero_shot.n << " clips, "
              << r.zero_shot.classes << " classes\n";
    for (std::size_t t = 0; t < r.zero_shot.confusion.size(); ++t) {
      std::cout << "  class " << t << ':';
      for (auto n : r.zero_shot.confusion[t]) std::cout << ' ' << n;
      std::cout << '\n';
    }
  }
  if (report.empty()) report = (fs::path(ckpt).parent_path() / (fs::path(ckpt).stem().string() + "." + mode + ".json")).string();
  write_text(report, j.dump(2) + "\n");
  std::cout << "report: " << report << '\n';
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoull(tok));
    } catch (const std::exception&) {
      throw UsageError("--seeds expects a comma-separated list of integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw UsageError("--seeds is empty");
  return out;
}

int cmd_ablate(const Common& c, const std::string& corpus_dir, const std::string& axis_name, const std::string& seeds,
               const std::string& out) {
  AblationAxis axis;
  try {
    axis = parse_ablation_axis(axis_name);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  if (out.empty()) throw UsageError("--out is required");
  const Corpus corpus = open_corpus(corpus_dir);
  const RunConfig cfg = bind_corpus(load_config(c), corpus);
  const TrainData data = make_train_data(load_split(corpus.dir, "train"), corpus.info.vocab, cfg.encoder.text_max_len);
  const EvalSet es = eval_set(corpus, cfg.eval.split);
  AblationOptions opt;
  opt.on_cell = [](const AblationVariant& v, const CellRun& r) {
    if (r.ok) {
      log::info(v.name + " seed " + std::to_string(r.seed) + ": R@1=" + std::to_string(r.metrics.r1));
    }
  };
  const AblationTable t =
      ablation_run(axis_name, nlohmann::json(cfg), ablation_variants(axis, cfg), parse_seeds(seeds), data, es, opt);
  const fs::path base = fs::path(out) / ("ablation_" + axis_name);
  write_text(base.string() + ".csv", ablation_csv(t));
  write_text(base.string() + ".json", ablation_json(t).dump(2) + "\n");
  write_text(base.string() + ".txt", ablation_text(t));
  std::cout << ablation_text(t) << base.string() << ".csv\n";
  return 0;
}

int cmd_gradcheck(std::size_t seeds) {
  const auto results = run_gradcheck_suite(seeds);
  std::map<std::string, std::pair<double, double>> worst;  // name -> (max error, tolerance)
  std::size_t failed = 0;
  for (const auto& r : results) {
    auto& w = worst[r.name];
    w.first = std::max(w.first, r.rel_error);
    w.second = r.tolerance;
    if (!r.passed()) ++failed;
  }
  for (const auto& [name, w] : worst) {
    std::cout << (w.first < w.second ? "PASS " : "FAIL ") << name << " max rel err " << w.first << " (tol " << w.second
              << ")\n";
  }
  std::cout << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed == 0 ? 0 : exit_code_for(ErrorKind::numeric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Masked visual modeling for dual-encoder video-text retrieval"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "render the synthetic corpus");
  std::string gen_out;
  bool force = false;
  add_common(gen, common);
  gen->add_option("-o,--out", gen_out, "corpus directory")->required();
  gen->add_flag("--force", force, "overwrite a non-empty output directory");

  auto* pre = app.add_subcommand("pretrain", "run the training curriculum");
  std::string corpus, out;
  bool resume = false, dry_run = false, no_mvm = false;
  add_common(pre, common);
  pre->add_option("--corpus", corpus, "corpus directory")->required();
  pre->add_option("-o,--out", out, "run directory");
  pre->add_flag("--resume", resume, "continue from <out>/checkpoints/last.ckpt");
  pre->add_flag("--dry-run", dry_run, "validate, build the model and run one step");
  pre->add_flag("--no-mvm", no_mvm, "contrastive objective only");

  auto* ft = app.add_subcommand("finetune", "fine-tune a checkpoint on the train split");
  std::string ckpt;
  bool ft_mvm = false;
  add_common(ft, common);
  ft->add_option("--checkpoint", ckpt, "pre-trained checkpoint")->required();
  ft->add_option("--corpus", corpus, "corpus directory")->required();
  ft->add_option("-o,--out", out, "run directory")->required();
  ft->add_flag("--mvm,!--no-mvm", ft_mvm, "keep the MVM term while fine-tuning");

  auto* ev = app.add_subcommand("eval", "zero-shot retrieval or classification on a split");
  std::string mode = "retrieval", split, report;
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt, "checkpoint to evaluate")->required();
  ev->add_option("--corpus", corpus, "corpus directory")->required();
  ev->add_option("--mode", mode, "retrieval | zeroshot")->check(CLI::IsMember({"retrieval", "zeroshot"}));
  ev->add_option("--split", split, "train | val | test (default: eval.split)")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--report", report, "JSON report path (default: next to the checkpoint)");

  auto* ab = app.add_subcommand("ablate", "train and score a predeclared variant set");
  std::string axis, seeds = "0,1,2";
  add_common(ab, common);
  ab->add_option("--corpus", corpus, "corpus directory")->required();
  ab->add_option("--axis", axis, "targets | update | masking | finetune_mvm")->required();
  ab->add_option("--seeds", seeds, "comma-separated training seeds");
  ab->add_option("-o,--out", out, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
  std::size_t gc_seeds = 20;
  gc->add_option("--seeds", gc_seeds, "seeds per case");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code_for(ErrorKind::usage);
  }

  try {
    if (*gen) return cmd_generate(common, gen_out, force);
    if (*pre) return cmd_pretrain(common, corpus, out, resume, dry_run, no_mvm);
    if (*ft) return cmd_finetune(common, ckpt, corpus, out, ft_mvm);
    if (*ev) return cmd_eval(common, ckpt, corpus, mode, split, report);
    if (*ab) return cmd_ablate(common, corpus, axis, seeds, out);
    if (*gc) return cmd_gradcheck(gc_seeds);
  } catch (const Error& e) {
    log::error(e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    log::error(e.what());
    return exit_code_for(ErrorKind::io);
  }
  return exit_code_for(ErrorKind::usage);
}
