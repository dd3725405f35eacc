#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clipvs/benchmark.hpp"
#include "clipvs/errors.hpp"
#include "clipvs/eval.hpp"
#include "clipvs/image.hpp"
#include "clipvs/prompts.hpp"
#include "clipvs/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace clipvs;

namespace {

json read_json_file(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw SpecError("config " + path + ": " + e.what());
  }
}

void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

// "a.b.c=value": value parsed as JSON, falling back to a plain string.
void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw SpecError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &config;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      break;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

struct ConfigArgs {
  std::string path;
  std::vector<std::string> overrides;
  bool toy = false;
};

void add_config_options(CLI::App* app, ConfigArgs& args) {
  app->add_option("-c,--config", args.path, "JSON config file");
  app->add_option("--set", args.overrides, "Override a config key, e.g. --set lr=0.01 (repeatable)");
  app->add_flag("--toy", args.toy, "Start from the toy preset");
}

TrainConfig resolve_train_config(const ConfigArgs& args, const std::function<void(json&)>& flags = {}) {
  json j = read_json_file(args.path);
  if (args.toy) j["toy_mode"] = true;
  if (flags) flags(j);
  for (const auto& o : args.overrides) apply_override(j, o);
  return train_config_from_json(j);
}

fs::path manifest_root(const std::string& manifest) { return fs::path(manifest).parent_path(); }

json query_embedding_json(const QueryEmbedding& q) {
  return {{"query_id", q.query_id}, {"source_frame_id", q.source_frame_id}, {"identity", q.identity},
          {"embedding", q.embedding}};
}

std::vector<QueryEmbedding> load_query_embeddings(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  std::vector<QueryEmbedding> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      out.push_back({j.at("query_id").get<std::string>(), j.at("source_frame_id").get<std::string>(),
                     j.at("identity").get<int>(), j.at("embedding").get<std::vector<double>>()});
    } catch (const json::exception& e) {
      throw ParseError(std::string("query embeddings: ") + e.what(), n);
    }
  }
  return out;
}

// --- subcommands -----------------------------------------------------------------

struct BuildArgs {
  ConfigArgs config;
  std::string source, format = "json", out;
  std::optional<int> stride;
  std::optional<std::uint64_t> seed;
};

int run_build(const BuildArgs& a) {
  json j = read_json_file(a.config.path);
  if (a.stride) j["sample_stride"] = *a.stride;
  if (a.seed) j["seed"] = *a.seed;
  for (const auto& o : a.config.overrides) apply_override(j, o);
  const fs::path out(a.out);

  TrackingSource source;
  fs::path source_root;
  BuildSpec spec;
  if (a.config.toy) {
    source_root = out / "source";
    source = generate_toy_source(ToyConfig{}, source_root);
    json base = to_json(toy_build_spec());
    base.update(j);
    spec = build_spec_from_json(base);
  } else {
    if (a.source.empty()) throw SpecError("build-dataset: --source is required without --toy");
    spec = build_spec_from_json(j);
    if (a.format == "json") {
      source = load_tracking_json(a.source);
      source_root = fs::path(a.source).parent_path();
    } else if (a.format == "cityflow") {
      source = load_cityflow_source(a.source);
      source_root = a.source;
    } else if (a.format == "synthehicle") {
      source = load_synthehicle_source(a.source);
      source_root = a.source;
    } else {
      throw SpecError("build-dataset: unknown --format '" + a.format + "'");
    }
  }
  const BuildResult result = build_dataset(source, spec);
  write_dataset(result, source_root, out);
  write_json_file(out / "build_report.json", to_json(result.report));
  std::cout << "train: " << to_json(dataset_stats(result.train, {})).dump() << '\n'
            << "test:  " << to_json(dataset_stats(result.test, result.queries)).dump() << '\n'
            << "report: " << to_json(result.report).dump() << '\n';
  return 0;
}

struct StageOneArgs {
  ConfigArgs config;
  std::string train, out;
  std::optional<int> epochs;
};

int run_pretrain_tokens(const StageOneArgs& a) {
  const TrainConfig config = resolve_train_config(a.config, [&](json& j) {
    if (a.epochs) j["prompt_epochs"] = *a.epochs;
  });
  const DatasetManifest train = load_manifest(a.train);
  const ReferenceTextEncoder text(config.text_encoder);
  const ReferenceImageEncoder image(config.image_encoder);
  PromptTrainConfig pc;
  pc.epochs = config.prompt_epochs;
  pc.lr = config.prompt_lr;
  pc.seed = config.seed;
  const PromptTrainResult r =
      pretrain_id_tokens(train, manifest_root(a.train), image, text, pc, config.max_crops_per_identity);
  for (IdentityId id : r.excluded) std::cerr << "warning: identity " << id << " has no crops, excluded\n";
  save_prompt_bank(a.out, r.bank, config.text_encoder);
  std::cout << "contrastive loss " << r.initial_loss << " -> "
            << (r.epoch_losses.empty() ? r.initial_loss : r.epoch_losses.back()) << " over " << r.epoch_losses.size()
            << " epochs; bank written to " << a.out << '\n';
  return 0;
}

int run_pretrain_teacher(const StageOneArgs& a) {
  const TrainConfig config = resolve_train_config(a.config, [&](json& j) {
    if (a.epochs) j["teacher_epochs"] = *a.epochs;
  });
  const DatasetManifest train = load_manifest(a.train);
  const TeacherTrainResult r = pretrain_teacher(train, manifest_root(a.train), config, config.teacher_epochs);
  save_teacher(a.out, *r.teacher, config.teacher);
  std::cout << "teacher accuracy " << (r.epoch_accuracy.empty() ? 0.0 : r.epoch_accuracy.back()) << " (chance "
            << 1.0 / train.num_identities << "); written to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  ConfigArgs config;
  std::string train, bank, teacher, out, metrics, resume;
  std::optional<int> steps;
  bool baseline = false;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  const TrainConfig config = resolve_train_config(a.config, [&](json& j) {
    if (a.steps) j["steps"] = *a.steps;
    if (a.baseline)
      j["losses"] = {{"sra_obj", false}, {"sra_id", false}, {"mil_img", false}, {"mil_box", false}, {"mil_fea", false}};
  });
  const DatasetManifest train = load_manifest(a.train);
  Stage2Trainer trainer(config, train, manifest_root(a.train), load_prompt_bank(a.bank), load_teacher(a.teacher));
  if (!a.resume.empty()) trainer.resume(a.resume);
  const int every = std::max(1, trainer.total_steps() / 20);
  trainer.run(a.metrics, a.out, [&](const StepMetrics& m) {
    if (!a.quiet && (m.step % every == 0 || m.step + 1 == trainer.total_steps()))
      std::cout << to_json(m).dump() << '\n' << std::flush;
  });
  std::cout << "checkpoint written to " << a.out << " at step " << trainer.current_step() << '\n';
  return 0;
}

struct SearchArgs {
  std::string checkpoint, test, queries, out;
  bool skip_missing = false, exclude_query_frame = false;
  std::optional<double> min_score;
};

int run_search_cmd(const SearchArgs& a) {
  const DatasetManifest test = load_manifest(a.test);
  const std::vector<QueryRecord> queries = load_queries(a.queries);
  SearchOptions options;
  options.skip_missing = a.skip_missing;
  options.eval.exclude_query_frame = a.exclude_query_frame;
  options.eval.min_detection_score = a.min_score;
  const SearchResult r = run_search(a.checkpoint, queries, test, manifest_root(a.test),
                                    fs::path(a.queries).parent_path(), options);
  for (const auto& m : r.missing) std::cerr << "warning: skipped unreadable image " << m << '\n';
  const fs::path out(a.out);
  fs::create_directories(out);
  save_detections(out / "detections.jsonl", r.gallery);
  {
    std::ofstream q(out / "query_embeddings.jsonl");
    for (const auto& e : r.queries) q << query_embedding_json(e).dump() << '\n';
    std::ofstream rk(out / "rankings.jsonl");
    for (const auto& rr : r.rankings) {
      json entries = json::array();
      for (const auto& e : rr.entries)
        entries.push_back({{"frame_id", e.frame_id},
                           {"box", {e.box.x1, e.box.y1, e.box.x2, e.box.y2}},
                           {"score", e.score},
                           {"tp", e.tp}});
      rk << json{{"query_id", rr.query_id}, {"num_gt", rr.num_gt}, {"entries", entries}}.dump() << '\n';
    }
  }
  write_json_file(out / "report.json", to_json(r.report));
  std::ofstream(out / "report.txt") << format_report(r.report);
  std::cout << format_report(r.report);
  return 0;
}

struct EvalArgs {
  std::string detections, query_embeddings, test, out;
  bool exclude_query_frame = false;
  std::optional<double> min_score;
};

int run_eval(const EvalArgs& a) {
  const DatasetManifest test = load_manifest(a.test);
  const Gallery gallery = load_detections(a.detections, test);
  const std::vector<QueryEmbedding> queries = load_query_embeddings(a.query_embeddings);
  EvalOptions options;
  options.exclude_query_frame = a.exclude_query_frame;
  options.min_detection_score = a.min_score;
  const EvalReport report = evaluate(queries, gallery, test, options);
  if (!a.out.empty()) write_json_file(a.out, to_json(report));
  std::cout << format_report(report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint vehicle detection and re-identification search"};
  app.require_subcommand(1);

  BuildArgs build;
  auto* b = app.add_subcommand("build-dataset", "Build train/test manifests and queries from tracking annotations");
  add_config_options(b, build.config);
  b->add_option("--source", build.source, "Tracking source (JSON file or dataset root)");
  b->add_option("--format", build.format, "Source layout: json, cityflow, synthehicle")
      ->check(CLI::IsMember({"json", "cityflow", "synthehicle"}));
  b->add_option("-o,--out", build.out, "Output directory")->required();
  b->add_option("--stride", build.stride, "Keep one frame in every N");
  b->add_option("--seed", build.seed, "Query selection seed");

  StageOneArgs tokens;
  auto* pt = app.add_subcommand("pretrain-tokens", "Stage 1: learn identity prompt tokens");
  add_config_options(pt, tokens.config);
  pt->add_option("--train", tokens.train, "Training manifest")->required();
  pt->add_option("-o,--out", tokens.out, "Prompt bank archive")->required();
  pt->add_option("--epochs", tokens.epochs);

  StageOneArgs teacher;
  auto* ptr = app.add_subcommand("pretrain-teacher", "Stage 1: train and freeze the re-identification teacher");
  add_config_options(ptr, teacher.config);
  ptr->add_option("--train", teacher.train, "Training manifest")->required();
  ptr->add_option("-o,--out", teacher.out, "Teacher archive")->required();
  ptr->add_option("--epochs", teacher.epochs);

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "Stage 2: train the search model");
  add_config_options(tr, train.config);
  tr->add_option("--train", train.train, "Training manifest")->required();
  tr->add_option("--bank", train.bank, "Prompt bank archive")->required();
  tr->add_option("--teacher", train.teacher, "Teacher archive")->required();
  tr->add_option("-o,--out", train.out, "Checkpoint path")->required();
  tr->add_option("--metrics", train.metrics, "Line-delimited metrics log");
  tr->add_option("--resume", train.resume, "Resume from checkpoint");
  tr->add_option("--steps", train.steps);
  tr->add_flag("--baseline", train.baseline, "Disable the five auxiliary losses");
  tr->add_flag("-q,--quiet", train.quiet);

  SearchArgs search;
  auto* se = app.add_subcommand("search", "Detect on the gallery, embed queries, rank and evaluate");
  se->add_option("--checkpoint", search.checkpoint)->required();
  se->add_option("--test", search.test, "Test (gallery) manifest")->required();
  se->add_option("--queries", search.queries, "Query list")->required();
  se->add_option("-o,--out", search.out, "Output directory")->required();
  se->add_flag("--skip-missing", search.skip_missing);
  se->add_flag("--exclude-query-frame", search.exclude_query_frame);
  se->add_option("--min-score", search.min_score, "Detection confidence floor");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate stored detections and query embeddings");
  e->add_option("--detections", ev.detections)->required();
  e->add_option("--query-embeddings", ev.query_embeddings)->required();
  e->add_option("--test", ev.test, "Test (gallery) manifest")->required();
  e->add_option("-o,--out", ev.out, "Report JSON");
  e->add_flag("--exclude-query-frame", ev.exclude_query_frame);
  e->add_option("--min-score", ev.min_score);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*b) return run_build(build);
    if (*pt) return run_pretrain_tokens(tokens);
    if (*ptr) return run_pretrain_teacher(teacher);
    if (*tr) return run_train(train);
    if (*se) return run_search_cmd(search);
    if (*e) return run_eval(ev);
  } catch (const clipvs::Error& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << '\n';
    return 3;
  }
  return 1;
}
