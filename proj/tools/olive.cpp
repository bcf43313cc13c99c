// Command-line front end: data generation, index building, training,
// evaluation, analyses and the HTTP service.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "olive/analysis.hpp"
#include "olive/metrics.hpp"
#include "olive/service.hpp"
#include "olive/training.hpp"

namespace fs = std::filesystem;
using namespace olive;
using nlohmann::json;

namespace {

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, ',');)
    if (auto t = detail::trim(part); !t.empty()) out.push_back(t);
  return out;
}

struct SplitOptions {
  std::uint64_t seed = 2;
  std::size_t per_class = 20;
  double val_fraction = 0.15;
  std::string unseen;

  void add(CLI::App* app) {
    app->add_option("--split-seed", seed, "seed of the image shuffle")->capture_default_str();
    app->add_option("--retrieval-per-class", per_class, "retrieval split quota per class")->capture_default_str();
    app->add_option("--val-fraction", val_fraction, "share of non-retrieval images held out")->capture_default_str();
    app->add_option("--unseen", unseen, "comma-separated classes kept out of training");
  }

  LabelSet labels(const DatasetFiles& d) const {
    const auto u = split_list(unseen);
    return {d.classes, {u.begin(), u.end()}};
  }

  Splits build(const DatasetFiles& d) const {
    Rng rng(seed);
    return build_datasets(d.annotations, labels(d), {per_class, val_fraction}, rng);
  }
};

const std::vector<ObjectExample>& pick_split(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "retrieval") return s.retrieval;
  if (name == "unseen") return s.unseen;
  fail(ErrorCode::Usage, "unknown split \"" + name + "\"; expected train, val, retrieval or unseen");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_file_atomic(path, text);
}

// ---------------------------------------------------------------------------

struct GenerateCmd {
  BenchmarkConfig cfg;
  std::string classes;
  std::string out;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("generate", "synthesize scenes, patch features and annotations");
    app->add_option("--out", out, "dataset directory")->required();
    app->add_option("--seed", cfg.seed)->capture_default_str();
    app->add_option("--images", cfg.images)->capture_default_str();
    app->add_option("--objects", cfg.objects_per_image, "objects per image")->capture_default_str();
    app->add_option("--channels", cfg.channels)->capture_default_str();
    app->add_option("--classes", classes, "comma-separated class names (default: builtin list)");
    app->add_option("--grid", cfg.scene.n, "patch grid side")->capture_default_str();
    app->add_option("--noise", cfg.scene.noise_sigma)->capture_default_str();
    app->add_option("--instance-sigma", cfg.scene.instance_sigma)->capture_default_str();
    app->add_option("--attribute-scale", cfg.scene.attribute_scale)->capture_default_str();
    app->callback([this] { run(); });
  }

  void run() {
    if (!classes.empty()) cfg.classes = split_list(classes);
    const auto b = generate_benchmark(cfg);
    save_dataset(out, b);
    std::printf("wrote %zu images, %zu objects to %s\n", b.features.size(), b.annotations.size(), out.c_str());
  }
};

struct BuildIndexCmd {
  std::string data, out, split = "retrieval";
  SplitOptions splits;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("build-index", "mean-pooled retrieval index over one split");
    app->add_option("--data", data)->required();
    app->add_option("--out", out)->required();
    app->add_option("--split", split)->capture_default_str();
    splits.add(app);
    app->callback([this] { run(); });
  }

  void run() {
    const auto d = load_dataset(data);
    const auto s = splits.build(d);
    const auto index = build_index(pick_split(s, split), d.features);
    save_index(index, out);
    std::printf("indexed %zu records (d=%zu) into %s\n", index.size(), index.dim(), out.c_str());
  }
};

struct ModelOptions {
  std::size_t width = 64, layers = 4, heads = 4, encoder_layers = 2, lora_rank = 0, max_new = 4;
  std::uint64_t seed = 3;

  void add(CLI::App* app) {
    app->add_option("--width", width, "decoder width and object vector size")->capture_default_str();
    app->add_option("--layers", layers, "decoder blocks")->capture_default_str();
    app->add_option("--heads", heads)->capture_default_str();
    app->add_option("--encoder-layers", encoder_layers)->capture_default_str();
    app->add_option("--lora-rank", lora_rank, "0 disables the adapter")->capture_default_str();
    app->add_option("--max-new-tokens", max_new)->capture_default_str();
    app->add_option("--model-seed", seed)->capture_default_str();
  }

  Model build(const DatasetFiles& d) const {
    ModelConfig c;
    c.encoder.n = d.features.grids().begin()->second.n;
    c.encoder.width = d.features.grids().begin()->second.d;
    c.encoder.out_dim = width;
    c.encoder.layers = encoder_layers;
    c.encoder.heads = heads;
    c.decoder.width = width;
    c.decoder.layers = layers;
    c.decoder.heads = heads;
    c.max_new_tokens = max_new;
    if (lora_rank) c.lora = LoraConfig{lora_rank, 2.0f * static_cast<float>(lora_rank)};
    return init_model(c, task_vocabulary(d.classes, d.attributes), seed);
  }
};

struct TrainCmd {
  std::string data, out, config;
  SplitOptions splits;
  ModelOptions model;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("train", "instruction-tune the object encoder and decoder");
    app->add_option("--data", data)->required();
    app->add_option("--out", out, "output directory")->required();
    app->add_option("--config", config, "key = value training config");
    splits.add(app);
    model.add(app);
    app->callback([this] { run(); });
  }

  void run() {
    TrainConfig cfg;
    if (!config.empty()) {
      const auto bytes = io::read_file(config);
      cfg = parse_train_config({bytes.begin(), bytes.end()});
    }
    const auto d = load_dataset(data);
    const auto s = splits.build(d);
    std::printf("train %zu, val %zu, retrieval %zu, unseen %zu\n", s.train.size(), s.val.size(), s.retrieval.size(),
                s.unseen.size());
    const auto r = train(cfg, model.build(d), d.features, s, splits.labels(d));
    fs::create_directories(out);
    save_checkpoint(r.best, fs::path(out) / "model.olvc");
    write_metrics(fs::path(out) / "metrics.jsonl", r.log);
    write_text(fs::path(out) / "train.cfg", train_config_to_text(cfg));
    for (const auto& j : r.log) std::printf("%s\n", j.dump().c_str());
    std::printf("best val loss %.4f after %zu steps\n", r.best_val_loss, r.steps);
  }
};

struct EvalCmd {
  std::string data, checkpoint, index, mode = "RG", split = "val", task = "classification", out, csv;
  std::size_t k = 5;
  SplitOptions splits;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("eval", "score R, G or RG predictions on a split");
    app->add_option("--data", data)->required();
    app->add_option("--checkpoint", checkpoint, "required for G and RG");
    app->add_option("--index", index, "retrieval index (default: built from the retrieval split)");
    app->add_option("--mode", mode)->check(CLI::IsMember({"R", "G", "RG"}))->capture_default_str();
    app->add_option("--split", split)->capture_default_str();
    app->add_option("--task", task)->check(CLI::IsMember({"classification", "captioning"}))->capture_default_str();
    app->add_option("--k", k)->capture_default_str();
    app->add_option("--out", out, "per-example JSON lines");
    app->add_option("--csv", csv, "per-example CSV");
    splits.add(app);
    app->callback([this] { run(); });
  }

  void run() {
    const auto d = load_dataset(data);
    const auto s = splits.build(d);
    const auto& examples = pick_split(s, split);
    require(!examples.empty(), ErrorCode::Precondition, "split \"" + split + "\" is empty");
    std::optional<Model> m;
    if (mode != "R") {
      require(!checkpoint.empty(), ErrorCode::Precondition, "mode " + mode + " needs --checkpoint");
      m = load_checkpoint(checkpoint);
    }
    const RetrievalIndex idx = index.empty() ? build_index(s.retrieval, d.features) : load_index(index).index;
    FeatureLookup lookup = [&](const std::string& id) -> const PatchGrid& { return d.features.get(id); };

    std::vector<std::string> preds, golds;
    std::vector<std::vector<std::string>> refs;
    std::string lines, table = "id,image_id,gold,prediction\n";
    for (const auto& e : examples) {
      const auto& grid = d.features.get(e.image_id);
      Prediction p;
      if (mode == "R") p = predict_retrieval(grid, e.mask, idx, k, {e.id});
      else if (mode == "G") p = predict_generative(*m, grid, e.mask, task);
      else p = predict_rag(*m, grid, e.mask, idx, lookup, k, task, {e.id});
      const auto gold = task == "classification" ? e.label : e.caption;
      preds.push_back(p.answer);
      golds.push_back(gold);
      refs.push_back({gold});
      lines += json{{"id", e.id}, {"image_id", e.image_id}, {"gold", gold}, {"prediction", p.answer}}.dump() + "\n";
      table += std::to_string(e.id) + "," + e.image_id + ",\"" + gold + "\",\"" + p.answer + "\"\n";
    }
    json summary{{"mode", mode}, {"split", split}, {"task", task}, {"k", k}, {"n", examples.size()}};
    if (task == "classification") {
      summary["accuracy"] = accuracy(preds, golds);
      summary["mAP"] = mean_average_precision(preds, golds, d.classes);
    } else {
      if (preds.size() >= 2) summary["cider"] = cider(preds, refs);
      summary["meteor_lite"] = meteor_lite(preds, refs);
    }
    if (!out.empty()) write_text(out, lines);
    if (!csv.empty()) write_text(csv, table);
    std::printf("%s\n", summary.dump().c_str());
  }
};

struct AnalyzeCmd {
  std::string out, data, checkpoint, split = "all", sizes = "2,10,20", ks = "1,3,5,10";
  long max_k = 32;
  std::size_t per_class = 200;
  std::vector<int> layers;
  SplitOptions splits;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("analyze", "context length, PCA and retrieval sweeps");
    app->require_subcommand(1);

    auto* ctx = app->add_subcommand("context-length", "prompt length against k per system");
    ctx->add_option("--max-k", max_k)->capture_default_str();
    ctx->add_option("--out", out, "plot data CSV (x,y,series)");
    ctx->callback([this] { context_length(); });

    auto* pca = app->add_subcommand("pca", "top-2 principal components of object representations");
    pca->add_option("--data", data)->required();
    pca->add_option("--checkpoint", checkpoint)->required();
    pca->add_option("--split", split, "all or a split name")->capture_default_str();
    pca->add_option("--per-class", per_class)->capture_default_str();
    pca->add_option("--layer", layers, "-1: object vector; l >= 0: decoder block l (default: -1, 0, L/2, L-1)")
        ->delimiter(',');
    pca->add_option("--out", out, "plot data CSV (x,y,series)");
    splits.add(pca);
    pca->callback([this] { run_pca(); });

    auto* sweep = app->add_subcommand("sweep", "OLIVE-R accuracy over retrieval set size and k");
    sweep->add_option("--data", data)->required();
    sweep->add_option("--sizes", sizes)->capture_default_str();
    sweep->add_option("--ks", ks)->capture_default_str();
    sweep->add_option("--out", out, "plot data CSV (x,y,series)");
    splits.add(sweep);
    sweep->callback([this] { run_sweep(); });
  }

  void context_length() {
    const ContextModel cm;
    std::string csv = "x,y,series\n";
    for (const auto& [system, cost] : cm.image_cost)
      for (long k = 0; k <= max_k; ++k)
        csv += std::to_string(k) + "," + std::to_string(cm.context_length(system, k)) + "," + system + "\n";
    for (const auto& [system, cost] : cm.image_cost)
      std::printf("%-13s slope %ld, k=4 in-context %ld\n", system.c_str(), cm.incontext_tokens(system, 1),
                  cm.incontext_tokens(system, 4));
    if (!out.empty()) write_text(out, csv);
  }

  void run_pca() {
    const auto d = load_dataset(data);
    std::vector<ObjectExample> pool;
    if (split == "all") {
      for (std::size_t i = 0; i < d.annotations.size(); ++i) {
        const auto& a = d.annotations[i];
        pool.push_back({static_cast<RecordId>(i), a.image_id, a.mask, a.label, a.caption.value_or("")});
      }
    } else {
      pool = pick_split(splits.build(d), split);
    }
    const auto m = load_checkpoint(checkpoint);
    auto chosen = layers;
    if (chosen.empty()) {
      const int depth = static_cast<int>(m.config.decoder.layers);
      chosen = {-1};
      for (int l : {0, depth / 2, depth - 1})
        if (l >= 0 && std::find(chosen.begin(), chosen.end(), l) == chosen.end()) chosen.push_back(l);
    }
    std::map<std::string, std::size_t> taken;
    std::vector<const ObjectExample*> picked;
    for (const auto& e : pool)
      if (taken[e.label]++ < per_class) picked.push_back(&e);

    std::string csv = "x,y,series\n";
    for (int layer : chosen) {
      std::vector<std::vector<double>> vecs;
      std::vector<std::string> labels;
      for (const auto* e : picked) {
        const auto v = object_representation(m, d.features.get(e->image_id), e->mask, layer);
        vecs.emplace_back(v.begin(), v.end());
        labels.push_back(e->label);
      }
      const auto r = pca_top2(vecs, labels);
      const std::string series = layer < 0 ? "object/" : "layer" + std::to_string(layer) + "/";
      for (std::size_t i = 0; i < vecs.size(); ++i) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%.9g,%.9g,", r.projections[i][0], r.projections[i][1]);
        csv += buf + series + labels[i] + "\n";
      }
      std::printf("%s\n", json{{"n", vecs.size()},
                               {"layer", layer},
                               {"eigenvalues", r.eigenvalues},
                               {"explained_ratio", r.explained_ratio()},
                               {"intra_class_cosine", r.intra_class_cosine},
                               {"inter_class_cosine", r.inter_class_cosine}}
                              .dump()
                              .c_str());
    }
    if (!out.empty()) write_text(out, csv);
  }

  void run_sweep() {
    const auto d = load_dataset(data);
    const auto s = splits.build(d);
    SweepSpec spec;
    spec.sizes.clear();
    spec.ks.clear();
    for (const auto& v : split_list(sizes)) spec.sizes.push_back(std::stoul(v));
    for (const auto& v : split_list(ks)) spec.ks.push_back(std::stoul(v));
    auto pool = s.retrieval;
    pool.insert(pool.end(), s.train.begin(), s.train.end());
    const auto table = sweep_retrieval(spec, pool, s.val, d.features);
    std::string csv = "x,y,series\n";
    for (const auto& c : table) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "%zu,%.6f,k=%zu\n", c.size, c.accuracy, c.k);
      csv += buf;
      std::printf("size %3zu  k %3zu  accuracy %.4f\n", c.size, c.k, c.accuracy);
    }
    if (!out.empty()) write_text(out, csv);
  }
};

struct ServeCmd {
  int port = 8080;
  std::string host = "127.0.0.1";
  ServiceConfig cfg;
  std::string index, checkpoint, features;

  void add(CLI::App& root) {
    auto* app = root.add_subcommand("serve", "HTTP service for the annotation UI");
    app->add_option("--port", port)->capture_default_str();
    app->add_option("--host", host)->capture_default_str();
    app->add_option("--index", index, "index file (env OLIVE_INDEX)");
    app->add_option("--checkpoint", checkpoint, "model checkpoint (env OLIVE_CHECKPOINT)");
    app->add_option("--features-dir", features, "patch feature directory (env OLIVE_FEATURES_DIR)");
    app->callback([this] { run(); });
  }

  void run() {
    const auto resolved = resolve_service_config({index, checkpoint, features});
    Service svc(resolved);
    httplib::Server server;
    mount(server, svc);
    std::printf("serving on http://%s:%d (revision %llu)\n", host.c_str(), port,
                static_cast<unsigned long long>(svc.revision()));
    std::fflush(stdout);
    require(server.listen(host, port), ErrorCode::Usage, "cannot listen on " + host + ":" + std::to_string(port));
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"object-level in-context prompting toolkit"};
  app.require_subcommand(1);
  GenerateCmd generate;
  BuildIndexCmd build_index_cmd;
  TrainCmd train_cmd;
  EvalCmd eval;
  AnalyzeCmd analyze;
  ServeCmd serve;
  generate.add(app);
  build_index_cmd.add(app);
  train_cmd.add(app);
  eval.add(app);
  analyze.add(app);
  serve.add(app);
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
