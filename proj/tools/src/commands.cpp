// Copyright 2026 The condflow Authors
// SPDX-License-Identifier: Apache-2.0

#include "condflow_cli/commands.hpp"

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "CLI11.hpp"
#include "condflow/cflow.hpp"
#include "condflow/editpipe.hpp"
#include "condflow/evalkit.hpp"
#include "condflow/synthworld.hpp"
#include "condflow_cli/checkpoint.hpp"
#include "condflow_cli/script.hpp"

namespace condflow::cli {

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, v);
  return buf;
}

std::string read_text(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return std::string(bytes.begin(), bytes.end());
}

struct Loaded {
  Checkpoint ckpt;
  WorldSpec world;
};

// Rebuilds the checkpoint's world and checks it is the one the model saw.
Loaded load_with_world(const std::string& path) {
  Loaded l{load_checkpoint(path), {}};
  l.world = make_world(l.ckpt.world_seed, l.ckpt.model.latent_dim, l.ckpt.world_attr_dim);
  if (l.world.fingerprint() != l.ckpt.world_fingerprint) {
    throw IntegrityError("checkpoint " + path + ": world fingerprint mismatch");
  }
  return l;
}

std::size_t world_channel(const WorldSpec& world, const std::string& name) {
  const auto idx = world.channel_index(name);
  if (!idx) throw ConfigError("unknown attribute channel '" + name + "'");
  return *idx;
}

EditTable load_table(const RunConfig& cfg, const std::optional<std::string>& override_path) {
  const std::string path = override_path ? *override_path : cfg.edit_table;
  if (path.empty()) return EditTable::builtin();
  return EditTable::parse(read_text(path));
}

void print_channels(std::ostream& out, const FlowModel& model, const WorldSpec& world,
                    std::span<const double> values, const std::vector<std::size_t>& skip) {
  const auto chans = model_channels(model, world);
  bool first = true;
  for (std::size_t m = 0; m < chans.size(); ++m) {
    bool skipped = false;
    for (std::size_t s : skip) skipped = skipped || s == chans[m];
    if (skipped) continue;
    out << (first ? "" : " ") << world.channel_names[chans[m]] << '=' << fmt("%.6g", values[m]);
    first = false;
  }
  if (first) out << "(none)";
}

}  // namespace

void cmd_gen_data(const RunConfig& cfg, const GenDataArgs& args, std::ostream& out) {
  const WorldSpec world = make_world(cfg.world_seed, cfg.latent_dim, cfg.attr_dim);
  const std::size_t n = args.n ? *args.n : cfg.data_size;
  const SyntheticDataset ds = gen_dataset(world, n, cfg.data_seed, cfg.truncation);
  std::ostringstream buf;
  write_dataset(buf, ds);
  const std::string bytes = buf.str();
  const auto path = args.out ? std::filesystem::path(*args.out) : resolve_output(cfg, cfg.data_path);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  out << "wrote " << ds.triples.size() << " triples to " << path.string() << '\n';
  out << "world fingerprint: " << hex64(ds.world_fingerprint) << '\n';
}

void cmd_train(RunConfig cfg, const TrainArgs& args, std::ostream& out) {
  if (args.blocks) cfg.blocks = *args.blocks;
  if (args.epochs) cfg.epochs = *args.epochs;
  if (args.max_iterations) cfg.max_iterations = *args.max_iterations;
  if (cfg.blocks == 0) throw ConfigError("train: blocks must be positive");

  const WorldSpec world = make_world(cfg.world_seed, cfg.latent_dim, cfg.attr_dim);
  std::vector<std::size_t> channels;
  if (cfg.channels.empty()) {
    for (std::size_t k = 0; k < world.attr_dim; ++k) channels.push_back(k);
  } else {
    for (const auto& name : cfg.channels) channels.push_back(world_channel(world, name));
  }

  RngStream init(cfg.train_seed);
  Checkpoint ckpt;
  ckpt.world_seed = cfg.world_seed;
  ckpt.world_fingerprint = world.fingerprint();
  ckpt.world_attr_dim = world.attr_dim;
  ckpt.model = FlowModel::initialized(cfg.latent_dim, channels.size(), cfg.blocks, init);
  ckpt.model.tanh_on_last = cfg.tanh_on_last;
  ckpt.model.channels = channels;
  out << "parameters: " << ckpt.model.param_count() << '\n';

  const auto out_path = args.out ? std::filesystem::path(*args.out) : resolve_output(cfg, cfg.checkpoint);
  if (!args.init_only) {
    const auto data_path = args.data ? std::filesystem::path(*args.data) : resolve_output(cfg, cfg.data_path);
    std::ifstream in(data_path, std::ios::binary);
    if (!in) throw ConfigError("cannot read dataset " + data_path.string());
    const SyntheticDataset ds = read_dataset(in);
    if (ds.world_fingerprint != world.fingerprint()) {
      throw IntegrityError("dataset " + data_path.string() + " was generated by a different world (fingerprint " +
                           hex64(ds.world_fingerprint) + ", config world " + hex64(world.fingerprint()) +
                           "); refusing to train");
    }
    ckpt.world_std = attribute_std(ds.triples);
    const auto triples = select_channels(ds.triples, channels);
    fit_attribute_scaler(ckpt.model, triples);

    TrainConfig tc;
    tc.epochs = cfg.epochs;
    tc.batch_size = cfg.batch_size;
    tc.lr = cfg.lr;
    tc.solver = cfg.solver;
    tc.seed = cfg.train_seed;
    tc.threads = cfg.threads;
    tc.max_iterations = cfg.max_iterations;
    tc.on_epoch = [&](std::size_t epoch, double nll) {
      out << "epoch " << epoch << " nll " << fmt("%.6f", nll) << '\n' << std::flush;
      ckpt.loss_curve.push_back(nll);
    };
    try {
      train(ckpt.model, triples, tc);
    } catch (const NumericError&) {
      ckpt.config_echo = cfg.to_text();
      auto last = out_path;
      last += ".lastgood";
      save_checkpoint(last, ckpt);
      out << "training diverged; last good parameters saved to " << last.string() << '\n';
      throw;
    }
    if (cfg.recalibrate) {
      recalibrate_norms(ckpt.model, triples, cfg.batch_size, cfg.solver, cfg.threads);
    }
  } else {
    ckpt.world_std.assign(world.attr_dim, 1.0);
  }
  ckpt.config_echo = cfg.to_text();
  save_checkpoint(out_path, ckpt);
  out << "wrote checkpoint " << out_path.string() << '\n';
}

void cmd_sample(const RunConfig& cfg, const SampleArgs& args, std::ostream& out) {
  const Loaded l = load_with_world(args.checkpoint);
  const FlowModel& model = l.ckpt.model;
  Vector target = model.scaler.mean;
  for (const auto& s : args.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects name=value, got '" + s + "'");
    const std::string name = s.substr(0, eq);
    const std::size_t wc = world_channel(l.world, name);
    const auto mc = model_channel_of(model, l.world, wc);
    if (!mc) throw ConfigError("the model does not condition on channel '" + name + "'");
    char* end = nullptr;
    const std::string value = s.substr(eq + 1);
    target[*mc] = std::strtod(value.c_str(), &end);
    if (value.empty() || *end != '\0') throw ConfigError("bad value in --set " + s);
  }
  RngStream stream(args.seed);
  SolverConfig sc = cfg.solver;
  const auto xs = conditional_sample(model, target, args.n, stream, args.truncation, sc, cfg.threads);

  std::vector<ExtendedLatent> latents;
  latents.reserve(xs.size());
  for (const auto& x : xs) latents.push_back(ExtendedLatent::broadcast(x, 1));
  const auto path = args.out ? std::filesystem::path(*args.out) : resolve_output(cfg, cfg.samples);
  write_text(path, format_latents(latents));

  const auto chans = model_channels(model, l.world);
  out << "wrote " << xs.size() << " samples to " << path.string() << '\n';
  out << "channel target mean stderr z\n";
  for (std::size_t m = 0; m < chans.size(); ++m) {
    double mean = 0.0;
    std::vector<double> v(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      v[i] = attribute_fn(l.world, xs[i])[chans[m]];
      mean += v[i];
    }
    mean /= static_cast<double>(xs.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double se = xs.size() > 1 ? std::sqrt(var / static_cast<double>(xs.size() - 1) /
                                                 static_cast<double>(xs.size()))
                                     : 0.0;
    out << l.world.channel_names[chans[m]] << ' ' << fmt("%.6g", target[m]) << ' ' << fmt("%.6g", mean)
        << ' ' << fmt("%.3g", se) << ' ' << (se > 0.0 ? fmt("%.2f", (mean - target[m]) / se) : "-")
        << '\n';
  }
}

void cmd_edit(const RunConfig& cfg, const EditArgs& args, std::ostream& out) {
  const Loaded l = load_with_world(args.checkpoint);
  const FlowModel& model = l.ckpt.model;
  const EditTable table = load_table(cfg, args.table);
  PipelineVariant variant;
  if (args.variant == "v1") {
    variant = PipelineVariant::v1;
  } else if (args.variant == "v2") {
    variant = PipelineVariant::v2;
  } else {
    throw ConfigError("unknown variant '" + args.variant + "' (expected v1 or v2)");
  }
  const auto steps = parse_edit_script(read_text(args.script));
  // Validate every step before touching any latent.
  std::vector<std::vector<std::size_t>> step_channels;
  for (const auto& st : steps) {
    if (!table.contains(st.edit)) {
      throw ConfigError("edit script line " + std::to_string(st.line) + ": unknown edit '" + st.edit + "'");
    }
    std::vector<std::size_t> mcs;
    for (std::size_t wc : edit_channels(l.world, st.edit)) {
      if (const auto mc = model_channel_of(model, l.world, wc)) mcs.push_back(*mc);
    }
    if (mcs.empty()) {
      throw ConfigError("edit script line " + std::to_string(st.line) + ": edit '" + st.edit +
                        "' acts on no channel the model conditions on");
    }
    if (st.values.size() != 1 && st.values.size() != mcs.size()) {
      throw ConfigError("edit script line " + std::to_string(st.line) + ": edit '" + st.edit + "' takes 1 or " +
                        std::to_string(mcs.size()) + " values");
    }
    step_channels.push_back(std::move(mcs));
  }

  auto latents = read_latents(args.input);
  EditOptions opts;
  opts.solver = cfg.solver;
  opts.measure = world_measure(model, l.world);
  opts.threads = cfg.threads;
  std::ostringstream log;
  const auto chans = model_channels(model, l.world);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    if (steps.empty()) break;
    EditSession session;
    session.state = latents[i].count() == 1 ? ExtendedLatent::broadcast(latents[i].rows.row(0), cfg.sites)
                                            : latents[i];
    if (session.state.dim() != model.latent_dim) throw ShapeError("edit: latent dimension does not match the model");
    session.attributes = measure_model_attributes(model, l.world, readout(session.state));
    log << "latent " << i << " start: ";
    print_channels(log, model, l.world, session.attributes, {});
    log << '\n';
    for (std::size_t s = 0; s < steps.size(); ++s) {
      const auto& st = steps[s];
      EditRequest req;
      req.kind = table.at(st.edit);
      req.mode = st.mode;
      req.variant = variant;
      for (std::size_t c = 0; c < step_channels[s].size(); ++c) {
        const std::size_t mc = step_channels[s][c];
        const double v = st.values.size() == 1 ? st.values[0] : st.values[c];
        const double t = st.kind == ValueKind::delta ? session.attributes[mc] + v : v;
        req.targets.push_back(ChannelTarget{mc, t});
      }
      const ExtendedLatent before = session.state;
      session = apply_edit(model, session, req, opts);
      std::size_t changed = 0;
      for (std::size_t r = 0; r < before.count(); ++r) {
        const auto a = before.rows.row(r);
        const auto b = session.state.rows.row(r);
        if (!std::equal(a.begin(), a.end(), b.begin())) ++changed;
      }
      log << "latent " << i << " step " << s + 1 << " (line " << st.line << ") " << st.edit << ' '
          << to_string(st.mode) << ' ' << to_string(variant) << " rows_changed=" << changed << '/'
          << before.count() << '\n';
      std::vector<std::size_t> targeted_world;
      log << "  targeted:";
      for (const auto& t : req.targets) {
        targeted_world.push_back(chans[t.channel]);
        log << ' ' << l.world.channel_names[chans[t.channel]] << " target=" << fmt("%.6g", t.value)
            << " measured=" << fmt("%.6g", session.attributes[t.channel]);
      }
      log << "\n  untargeted: ";
      print_channels(log, model, l.world, session.attributes, targeted_world);
      log << '\n';
    }
    latents[i] = session.state;
  }
  const auto path = args.out ? std::filesystem::path(*args.out) : resolve_output(cfg, cfg.edited);
  write_text(path, format_latents(latents));
  if (args.log) write_text(*args.log, log.str());
  out << log.str();
  out << "wrote " << latents.size() << " latents to " << path.string() << '\n';
}

void cmd_eval(const RunConfig& cfg, const EvalArgs& args, std::ostream& out) {
  const EvalSuite suite = parse_suite(args.suite);
  const Loaded l = load_with_world(args.checkpoint);
  EvalSettings s;
  s.seed = args.seed ? *args.seed : cfg.eval_seed;
  s.starts = cfg.eval_starts;
  s.diffvec_starts = cfg.diffvec_starts;
  s.path_samples = cfg.path_samples;
  s.shift = cfg.eval_shift;
  s.truncation = cfg.truncation;
  s.sites = cfg.sites;
  s.identity_quantile = cfg.identity_quantile;
  s.identity_threshold = cfg.identity_threshold;
  s.identity_edit = cfg.identity_edit;
  s.diffvec_edit = cfg.diffvec_edit;
  s.leakage_edit = cfg.leakage_edit;
  s.table = load_table(cfg, std::nullopt);
  s.edit.solver = cfg.solver;
  s.edit.threads = cfg.threads;
  s.world_std = l.ckpt.world_std;
  const MetricReport report = run_suite(l.ckpt.model, l.world, suite, s);
  const auto text_path = args.out ? std::filesystem::path(*args.out) : resolve_output(cfg, cfg.report);
  const auto json_path = args.json ? std::filesystem::path(*args.json) : resolve_output(cfg, cfg.report_json);
  write_text(text_path, report.to_text());
  write_text(json_path, report.to_json());
  out << report.to_text();
}

void cmd_inspect(const std::string& checkpoint, std::ostream& out) {
  const Checkpoint c = load_checkpoint(checkpoint);
  const FlowModel& m = c.model;
  out << "format version: " << kCheckpointVersion << '\n';
  out << "world seed: " << c.world_seed << '\n';
  out << "world fingerprint: " << hex64(c.world_fingerprint) << '\n';
  out << "latent dim: " << m.latent_dim << '\n';
  out << "attribute dim: " << m.attr_dim << " of " << c.world_attr_dim << '\n';
  out << "blocks: " << m.blocks.size() << '\n';
  out << "tanh on last block: " << (m.tanh_on_last ? "yes" : "no") << '\n';
  out << "end time: " << fmt("%.6g", m.end_time()) << '\n';
  out << "parameters: " << m.param_count() << '\n';
  if (c.loss_curve.empty()) {
    out << "final training nll: n/a\n";
  } else {
    out << "final training nll: " << fmt("%.6f", c.loss_curve.back()) << '\n';
    out << "loss curve:";
    for (double v : c.loss_curve) out << ' ' << fmt("%.6f", v);
    out << '\n';
  }
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::numeric:
    case ErrorKind::integrity:
    case ErrorKind::divergence:
    case ErrorKind::singular:
      return 2;
    case ErrorKind::shape:
    case ErrorKind::empty_request:
    case ErrorKind::config:
    case ErrorKind::undefined_metric:
      return 1;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"condflow: conditional continuous normalizing flows on a synthetic latent world"};
  app.require_subcommand(1);
  std::string config_path;
  app.add_option("-c,--config", config_path, "Run configuration file");

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen_cmd->add_option("-o,--out", gen.out, "Output dataset path");
  gen_cmd->add_option("-n", gen.n, "Number of triples");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a flow on a dataset");
  train_cmd->add_option("-d,--data", tr.data, "Dataset path");
  train_cmd->add_option("-o,--out", tr.out, "Checkpoint path");
  train_cmd->add_option("--blocks", tr.blocks, "Number of dynamics blocks");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");
  train_cmd->add_option("--max-iterations", tr.max_iterations, "Stop after this many iterations");
  train_cmd->add_flag("--init-only", tr.init_only, "Write the initialized model without training");

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "Sample latents under fixed attributes");
  sample_cmd->add_option("checkpoint", sa.checkpoint)->required();
  sample_cmd->add_option("--set", sa.sets, "Attribute target name=value (default: dataset mean)");
  sample_cmd->add_option("-n", sa.n, "Number of samples");
  sample_cmd->add_option("--seed", sa.seed, "Sampling seed");
  sample_cmd->add_option("--truncation", sa.truncation, "Scale applied to the prior draws");
  sample_cmd->add_option("-o,--out", sa.out, "Output latent file");

  EditArgs ed;
  auto* edit_cmd = app.add_subcommand("edit", "Apply an edit script to latents");
  edit_cmd->add_option("checkpoint", ed.checkpoint)->required();
  edit_cmd->add_option("input", ed.input, "Input latent file")->required();
  edit_cmd->add_option("script", ed.script, "Edit script")->required();
  edit_cmd->add_option("--variant", ed.variant, "Pipeline variant: v1 or v2");
  edit_cmd->add_option("--table", ed.table, "Edit table file");
  edit_cmd->add_option("-o,--out", ed.out, "Output latent file");
  edit_cmd->add_option("--log", ed.log, "Step log file");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("checkpoint", ev.checkpoint)->required();
  eval_cmd->add_option("--suite", ev.suite, "identity, consistency, diffvec, path, leakage or all");
  eval_cmd->add_option("--seed", ev.seed, "Evaluation seed");
  eval_cmd->add_option("-o,--out", ev.out, "Text report path");
  eval_cmd->add_option("--json", ev.json, "JSON report path");

  std::string inspect_path;
  auto* inspect_cmd = app.add_subcommand("inspect", "Summarize a checkpoint");
  inspect_cmd->add_option("checkpoint", inspect_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    if (gen_cmd->parsed()) cmd_gen_data(cfg, gen, out);
    if (train_cmd->parsed()) cmd_train(cfg, tr, out);
    if (sample_cmd->parsed()) cmd_sample(cfg, sa, out);
    if (edit_cmd->parsed()) cmd_edit(cfg, ed, out);
    if (eval_cmd->parsed()) cmd_eval(cfg, ev, out);
    if (inspect_cmd->parsed()) cmd_inspect(inspect_path, out);
  } catch (const Error& e) {
    err << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace condflow::cli
