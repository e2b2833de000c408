#include <csignal>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "retrograph/error.hpp"
#include "retrograph/explain.hpp"
#include "retrograph/planner.hpp"
#include "retrograph/service.hpp"
#include "retrograph/trainer.hpp"

// After Eigen: <resolv.h> defines a _res macro.
#include <httplib.h>

using namespace retrograph;

namespace {

std::optional<int> opt_class(int c) { return c > 0 ? std::optional<int>(c) : std::nullopt; }

void write_json(const nlohmann::json& j, const std::string& path) {
  if (path == "-") {
    std::cout << j.dump(2) << "\n";
    return;
  }
  std::ofstream out(path);
  if (!out) throw FormatError("cannot write " + path);
  out << j.dump(2) << "\n";
}

struct TrainArgs {
  std::string corpus, out, metrics;
  std::string split = "train";
  ModelConfig dims;
  TrainConfig tc;
  bool four_tasks = false;
};

int run_train(TrainArgs& a) {
  const auto split = split_from_string(a.split);
  if (!split) throw ConfigError("unknown split '" + a.split + "'");
  CorpusStats stats;
  const auto corpus = load_corpus(a.corpus, *split, &stats);
  a.tc.fuse_rcp = !a.four_tasks;
  a.dims.seed = a.tc.seed;
  std::ofstream metrics_file;
  std::ostream* metrics = &std::cout;
  if (!a.metrics.empty()) {
    metrics_file.open(a.metrics);
    if (!metrics_file) throw FormatError("cannot write " + a.metrics);
    metrics = &metrics_file;
  }
  const FitResult fit_result = fit(corpus, a.dims, a.tc, metrics);
  save_model(fit_result.model, a.out);
  std::cerr << fmt::format("trained on {} records ({} skipped), {} steps, vocabulary {}; saved {}\n", corpus.size(),
                           fit_result.skipped, fit_result.steps.size(), fit_result.model.vocab.size(), a.out);
  return 0;
}

struct PredictArgs {
  std::string checkpoint, smiles;
  int cls = 0;
  int topk = 10;
  BeamConfig beam;
};

int run_predict(PredictArgs& a) {
  const Model model = load_model(a.checkpoint);
  const Predictor predictor(model);
  a.beam.k_out = a.topk;
  const auto cands = predictor.predict(parse_smiles(a.smiles), opt_class(a.cls), a.beam);
  for (std::size_t i = 0; i < cands.size(); ++i) {
    const auto& t = cands[i].trace;
    std::cout << fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\t{}\n", i + 1, t.total(), t.delta(1),
                             t.delta(2), t.delta(3), t.delta(4), cands[i].key());
  }
  return 0;
}

struct PlanArgs {
  std::string checkpoint, target, blocks, json_out = "-";
  PlanLimits limits;
  int routes = 1;
};

int run_plan(PlanArgs& a) {
  const Model model = load_model(a.checkpoint);
  const Predictor predictor(model);
  std::size_t rejected = 0;
  const auto blocks = BuildingBlockSet::load(a.blocks, &rejected);
  if (rejected) std::cerr << rejected << " unparseable building-block lines skipped\n";
  a.limits.max_routes = a.routes;
  a.limits.validate();
  RouteSearch search(parse_smiles(a.target), blocks, predictor_expander(predictor), a.limits);
  search.run();
  if (search.solved()) {
    std::cout << search.text_tree(a.routes);
  } else {
    std::cerr << fmt::format("no route found after {} expansions\n", search.expansions());
  }
  write_json(search.snapshot(), a.json_out);
  return search.solved() ? 0 : 3;
}

struct ServeArgs {
  std::string checkpoint, blocks, host = "127.0.0.1", static_dir, dump_dir;
  int port = 8080;
  int session_ttl = 1800;
  int max_inflight = 8;
};

httplib::Server* g_server = nullptr;

int run_serve(const ServeArgs& a) {
  std::map<std::string, BuildingBlockSet> profiles;
  if (!a.blocks.empty()) profiles["default"] = BuildingBlockSet::load(a.blocks);
  else profiles["default"] = BuildingBlockSet{};
  ServiceConfig cfg;
  cfg.session_ttl = std::chrono::seconds(a.session_ttl);
  cfg.max_inflight = a.max_inflight;
  cfg.static_dir = a.static_dir;
  cfg.dump_dir = a.dump_dir;
  Service service(load_model(a.checkpoint), std::move(profiles), cfg);
  httplib::Server server;
  service.mount(server);
  g_server = &server;
  std::signal(SIGINT, [](int) { g_server->stop(); });
  std::signal(SIGTERM, [](int) { g_server->stop(); });
  std::atomic<bool> done{false};
  std::thread reaper([&] {
    while (!done) {
      std::this_thread::sleep_for(std::chrono::seconds(1));
      service.evict_expired();
    }
  });
  std::cerr << fmt::format("listening on http://{}:{}\n", a.host, a.port);
  const bool ok = server.listen(a.host, a.port);
  done = true;
  reaper.join();
  if (!ok) {
    std::cerr << "cannot listen on " << a.host << ":" << a.port << "\n";
    return 1;
  }
  return 0;
}

struct ExplainArgs {
  std::string checkpoint, reaction, smiles, task = "overall", encoder, dump;
  int cls = 0;
  bool no_contrastive = false;
};

int run_apex(const ExplainArgs& a) {
  const Model model = load_model(a.checkpoint);
  const auto rec = parse_reaction("cli", opt_class(a.cls), a.reaction);
  ApexOptions opts;
  opts.contrastive = !a.no_contrastive;
  const auto c = apex_contributions(model, rec, parse_explain_task(a.task), opts);
  std::cout << fmt::format("# task={} base_loss={:.8g}\n", explain_task_name(c.task), c.base_loss);
  std::cout << "index\tmap\tscore\tmasked_loss\n";
  for (std::size_t v = 0; v < c.score.size(); ++v) {
    std::cout << fmt::format("{}\t{}\t{:.6f}\t{:.8g}\n", v, rec.product.atom(static_cast<int>(v)).atom_map,
                             c.score[v], c.masked_loss[v]);
  }
  return 0;
}

int run_trace(const ExplainArgs& a) {
  const Model model = load_model(a.checkpoint);
  const auto rec = parse_reaction("cli", opt_class(a.cls), a.reaction);
  const auto t = reaction_type_trace(model, rec, parse_explain_task(a.task));
  std::cout << "index\thard_label";
  for (int k = 1; k <= kNumReactionTypes; ++k) std::cout << "\ttype" << k;
  std::cout << "\n";
  for (int v = 0; v < t.contributions.rows(); ++v) {
    std::cout << v << "\t" << t.hard_label[static_cast<std::size_t>(v)];
    for (int k = 0; k < kNumReactionTypes; ++k) std::cout << fmt::format("\t{:.6f}", t.contributions(v, k));
    std::cout << "\n";
  }
  return 0;
}

int run_heads(const ExplainArgs& a) {
  const Model model = load_model(a.checkpoint);
  const auto rep = attention_heatmaps(parse_smiles(a.smiles), model, a.encoder);
  std::cout << "# encoder=" << rep.encoder << "\n";
  std::cout << "head\trv\tclass\n";
  for (const auto& h : rep.heads) std::cout << fmt::format("{}\t{:.6f}\t{}\n", h.head, h.rv, head_class_name(h.cls));
  if (!a.dump.empty()) save_heatmaps(rep, a.dump);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-step retrosynthesis, route planning and model inspection"};
  app.require_subcommand(1);
  int code = 0;

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train a model on a mapped reaction corpus");
  train->add_option("--corpus", ta.corpus, "CSV with id,class,reaction[,split]")->required()->check(CLI::ExistingFile);
  train->add_option("--out", ta.out, "Checkpoint to write")->required();
  train->add_option("--metrics", ta.metrics, "Metrics log (default stdout)");
  train->add_option("--split", ta.split, "Corpus split to train on")->capture_default_str();
  train->add_option("--d", ta.dims.d)->capture_default_str();
  train->add_option("--d-k", ta.dims.d_k)->capture_default_str();
  train->add_option("--heads", ta.dims.n_head)->capture_default_str();
  train->add_option("--layers", ta.dims.layers)->capture_default_str();
  train->add_option("--epochs", ta.tc.epochs)->capture_default_str();
  train->add_option("--max-steps", ta.tc.max_steps, "Stop after this many steps (0: epochs only)")->capture_default_str();
  train->add_option("--batch-size", ta.tc.batch_size)->capture_default_str();
  train->add_option("--lr", ta.tc.learning_rate)->capture_default_str();
  train->add_option("--momentum", ta.tc.momentum)->capture_default_str();
  train->add_option("--clip-norm", ta.tc.clip_norm)->capture_default_str();
  train->add_option("--tau-weights", ta.tc.tau_weights)->capture_default_str();
  train->add_option("--tau-contrastive", ta.tc.tau_contrastive)->capture_default_str();
  train->add_option("--k-r", ta.tc.k_r, "Max hop of the local bias")->capture_default_str();
  train->add_option("--k", ta.tc.k, "Max hydrogen change")->capture_default_str();
  train->add_option("--seed", ta.tc.seed)->capture_default_str();
  train->add_flag("--type-known", ta.tc.reaction_type_known, "Condition on the reaction class");
  train->add_flag("--four-tasks", ta.four_tasks, "Weight bond and hydrogen losses separately");
  train->add_flag("--no-cl", ta.tc.ablations.no_cl);
  train->add_flag("--no-sa", ta.tc.ablations.no_sa);
  train->add_flag("--no-jl", ta.tc.ablations.no_jl);
  train->add_flag("--mask-local", ta.tc.ablations.mask_local);
  train->add_flag("--mask-global", ta.tc.ablations.mask_global);
  train->callback([&] { code = run_train(ta); });

  PredictArgs pa;
  auto* predict = app.add_subcommand("predict", "Ranked single-step disconnections of a product");
  predict->add_option("--checkpoint", pa.checkpoint)->required()->check(CLI::ExistingFile);
  predict->add_option("--smiles", pa.smiles, "Product SMILES")->required();
  predict->add_option("--class", pa.cls, "Reaction class 1-10 (0: unknown)")->check(CLI::Range(0, 10));
  predict->add_option("--topk", pa.topk)->capture_default_str()->check(CLI::PositiveNumber);
  predict->add_option("--beam-lg", pa.beam.n_lg)->capture_default_str();
  predict->add_option("--beam-conn", pa.beam.n_conn)->capture_default_str();
  predict->add_option("--beam-bond", pa.beam.n_bond)->capture_default_str();
  predict->add_flag("--beam-greedy", pa.beam.greedy, "One choice per action");
  predict->callback([&] { code = run_predict(pa); });

  PlanArgs pl;
  auto* plan_cmd = app.add_subcommand("plan", "Multi-step route search to building blocks");
  plan_cmd->add_option("--checkpoint", pl.checkpoint)->required()->check(CLI::ExistingFile);
  plan_cmd->add_option("--target", pl.target, "Target SMILES")->required();
  plan_cmd->add_option("--blocks", pl.blocks, "Building blocks, one SMILES per line")->required()->check(CLI::ExistingFile);
  plan_cmd->add_option("--max-expansions", pl.limits.max_expansions)->capture_default_str();
  plan_cmd->add_option("--depth", pl.limits.max_depth)->capture_default_str();
  plan_cmd->add_option("--topk", pl.limits.topk_per_expand, "Candidates per expansion")->capture_default_str();
  plan_cmd->add_option("--routes", pl.routes, "Solved routes to collect")->capture_default_str();
  plan_cmd->add_option("--json", pl.json_out, "Tree dump path ('-' for stdout)")->capture_default_str();
  plan_cmd->callback([&] { code = run_plan(pl); });

  ServeArgs sa;
  auto* serve = app.add_subcommand("serve", "HTTP service");
  serve->add_option("--checkpoint", sa.checkpoint)->envname("RETROGRAPH_CHECKPOINT")->required()->check(CLI::ExistingFile);
  serve->add_option("--blocks", sa.blocks)->envname("RETROGRAPH_BLOCKS")->check(CLI::ExistingFile);
  serve->add_option("--host", sa.host)->envname("RETROGRAPH_HOST")->capture_default_str();
  serve->add_option("--port", sa.port)->envname("RETROGRAPH_PORT")->capture_default_str();
  serve->add_option("--session-ttl", sa.session_ttl, "Idle seconds before a session is dropped")
      ->envname("RETROGRAPH_SESSION_TTL")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  serve->add_option("--max-inflight", sa.max_inflight)->envname("RETROGRAPH_MAX_INFLIGHT")->capture_default_str();
  serve->add_option("--static-dir", sa.static_dir, "Served under /ui")->envname("RETROGRAPH_STATIC_DIR");
  serve->add_option("--dump-dir", sa.dump_dir, "Evicted session trees go here")->envname("RETROGRAPH_DUMP_DIR");
  serve->callback([&] { code = run_serve(sa); });

  ExplainArgs ea;
  auto* explain = app.add_subcommand("explain", "Atom contributions and attention heads");
  explain->require_subcommand(1);
  auto* apex = explain->add_subcommand("apex", "Per-atom change rates of a task loss");
  auto* trace = explain->add_subcommand("trace", "Per-atom contributions under each reaction class");
  for (auto* sub : {apex, trace}) {
    sub->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
    sub->add_option("--reaction", ea.reaction, "Atom-mapped reaction SMILES")->required();
    sub->add_option("--task", ea.task, "rcp, lgm, lgc or overall")->capture_default_str();
    sub->add_option("--class", ea.cls)->check(CLI::Range(0, 10));
  }
  apex->add_flag("--no-contrastive", ea.no_contrastive, "Score LGM without the contrastive term");
  apex->callback([&] { code = run_apex(ea); });
  trace->callback([&] { code = run_trace(ea); });
  auto* heads = explain->add_subcommand("heads", "Local/global make-up of each attention head");
  heads->add_option("--checkpoint", ea.checkpoint)->required()->check(CLI::ExistingFile);
  heads->add_option("--smiles", ea.smiles)->required();
  heads->add_option("--encoder", ea.encoder, "Encoder prefix (default: the RCP encoder)");
  heads->add_option("--dump", ea.dump, "Write bias/global matrices as a checkpoint");
  heads->callback([&] { code = run_heads(ea); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return code;
}
