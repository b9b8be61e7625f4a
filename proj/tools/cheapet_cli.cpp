// cheapet: command-line frontend for the routing library.
//
// Subcommands operate on prediction traces (JSONL) and model files:
//
//   fit-mdsa     fit surprise-adequacy statistics from a labeled trace
//   calibrate    pick a routing threshold for a target forwarding fraction
//   evaluate     score one threshold against a trace
//   sweep        write the full accuracy/cost trade-off curve
//   serve        run the routing gateway
//   stub-remote  run a deterministic fake remote endpoint
//
// Exit codes: 0 success, 1 validation/configuration error, 2 I/O or network
// error, 64 usage error.

#include <atomic>
#include <chrono>
#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "cheapet/cheapet.hpp"

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop.store(true); }

void install_signal_handlers() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
}

std::optional<cheapet::MdsaModel> maybe_load_mdsa(cheapet::SupervisorKind kind,
                                                  const std::string& path) {
  if (kind != cheapet::SupervisorKind::MDSA) return std::nullopt;
  if (path.empty()) throw cheapet::ConfigError("--supervisor mdsa requires --mdsa-model");
  return cheapet::load_mdsa(path);
}

std::vector<double> score_values(const std::vector<cheapet::PredictionRecord>& records,
                                 cheapet::SupervisorKind kind,
                                 const cheapet::MdsaModel* mdsa) {
  auto scores = cheapet::score_trace(records, kind, mdsa);
  std::vector<double> values;
  values.reserve(scores.size());
  for (const auto& s : scores) values.push_back(s.value);
  return values;
}

void run_fit_mdsa(const std::string& trace_path, const std::string& out_path, bool global_fit,
                  double lambda_scale) {
  auto records = cheapet::read_trace(trace_path);
  std::vector<std::vector<double>> activations;
  std::vector<cheapet::ClassId> labels;
  activations.reserve(records.size());
  labels.reserve(records.size());
  for (const auto& record : records) {
    if (!global_fit) {
      if (!record.true_label) {
        throw cheapet::ValidationError("record '" + record.id +
                                       "' has no true_label; class-conditional fitting needs "
                                       "labels (or pass --global)");
      }
      labels.push_back(*record.true_label);
    }
    activations.push_back(record.activation);
  }
  cheapet::MdsaModel model =
      cheapet::fit_mdsa(activations, labels, /*class_conditional=*/!global_fit, lambda_scale);
  cheapet::save_mdsa(model, out_path);
  std::cout << nlohmann::json{{"out", out_path},
                              {"classes", model.per_class.size()},
                              {"dimension", model.dimension()},
                              {"class_conditional", model.class_conditional},
                              {"lambda_scale", model.lambda_scale},
                              {"samples", records.size()}}
                   .dump()
            << "\n";
}

void run_serve(const std::string& config_path) {
  cheapet::GatewayConfig config = cheapet::load_gateway_config(config_path);
  cheapet::Gateway gateway(std::move(config));
  install_signal_handlers();
  gateway.run(&g_stop);
}

void run_stub_remote(int port, const cheapet::StubRemoteOptions& options) {
  cheapet::StubRemoteServer server(options);
  if (port > 0) {
    server.start_on("127.0.0.1", port);
  } else {
    server.start();
  }
  std::cout << nlohmann::json{{"listening", server.base_url()},
                              {"accuracy", options.accuracy},
                              {"failure_rate", options.failure_rate},
                              {"seed", options.seed}}
                   .dump()
            << std::endl;
  install_signal_handlers();
  while (!g_stop.load()) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cost-aware routing between a local surrogate model and a remote service"};
  app.require_subcommand(1);

  // fit-mdsa
  auto* fit = app.add_subcommand("fit-mdsa", "fit MDSA statistics from a trace");
  std::string fit_trace, fit_out;
  bool fit_global = false;
  double fit_lambda = cheapet::kDefaultLambdaScale;
  fit->add_option("--trace", fit_trace, "input trace (JSONL)")->required();
  fit->add_option("--out", fit_out, "output model path (JSON)")->required();
  fit->add_flag("--global", fit_global, "fit one global distribution instead of per-class");
  fit->add_option("--lambda-scale", fit_lambda, "covariance regularization scale");
  fit->callback([&] { run_fit_mdsa(fit_trace, fit_out, fit_global, fit_lambda); });

  // calibrate
  auto* cal = app.add_subcommand("calibrate", "choose a threshold for a target forward fraction");
  std::string cal_trace, cal_supervisor, cal_mdsa;
  double cal_target = 0.0;
  cal->add_option("--trace", cal_trace, "calibration trace (JSONL)")->required();
  cal->add_option("--supervisor", cal_supervisor, "sm or mdsa")->required();
  cal->add_option("--mdsa-model", cal_mdsa, "fitted MDSA model (required for mdsa)");
  cal->add_option("--target-forward", cal_target, "target forward fraction in [0,1]")->required();
  cal->callback([&] {
    auto kind = cheapet::supervisor_from_string(cal_supervisor);
    auto mdsa = maybe_load_mdsa(kind, cal_mdsa);
    auto records = cheapet::read_trace(cal_trace);
    auto values = score_values(records, kind, mdsa ? &*mdsa : nullptr);
    auto result = cheapet::calibrate_threshold(std::move(values), cal_target);
    std::cout << nlohmann::json{{"threshold", result.threshold},
                                {"target_forward_fraction", result.target_forward_fraction},
                                {"achieved_forward_fraction", result.achieved_forward_fraction},
                                {"n", records.size()},
                                {"supervisor", to_string(kind)}}
                     .dump()
              << "\n";
  });

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "evaluate one threshold against a labeled trace");
  std::string ev_trace, ev_supervisor, ev_mdsa;
  double ev_threshold = 0.0;
  bool ev_cost_weighted = false;
  ev->add_option("--trace", ev_trace, "labeled trace (JSONL)")->required();
  ev->add_option("--supervisor", ev_supervisor, "sm or mdsa")->required();
  ev->add_option("--threshold", ev_threshold, "routing threshold")->required();
  ev->add_option("--mdsa-model", ev_mdsa, "fitted MDSA model (required for mdsa)");
  ev->add_flag("--cost-weighted", ev_cost_weighted,
               "weigh cost saving by per-record remote cost instead of request counts");
  ev->callback([&] {
    auto kind = cheapet::supervisor_from_string(ev_supervisor);
    auto mdsa = maybe_load_mdsa(kind, ev_mdsa);
    auto records = cheapet::read_trace(ev_trace);
    auto scores = cheapet::score_trace(records, kind, mdsa ? &*mdsa : nullptr);
    auto eval =
        cheapet::system_accuracy(records, scores, ev_threshold, !ev_cost_weighted);
    std::cout << nlohmann::json{{"system_accuracy", eval.accuracy},
                                {"forward_fraction", eval.forward_fraction},
                                {"cost_saving", eval.cost_saving},
                                {"n_local", eval.n_local},
                                {"n_remote", eval.n_remote},
                                {"threshold", ev_threshold},
                                {"supervisor", to_string(kind)}}
                     .dump()
              << "\n";
  });

  // sweep
  auto* sw = app.add_subcommand("sweep", "write the accuracy/cost curve over all thresholds");
  std::string sw_trace, sw_supervisor, sw_mdsa, sw_out, sw_format = "csv";
  bool sw_cost_weighted = false;
  sw->add_option("--trace", sw_trace, "labeled trace (JSONL)")->required();
  sw->add_option("--supervisor", sw_supervisor, "sm or mdsa")->required();
  sw->add_option("--out", sw_out, "output report path")->required();
  sw->add_option("--format", sw_format, "csv or jsonl (default csv)");
  sw->add_option("--mdsa-model", sw_mdsa, "fitted MDSA model (required for mdsa)");
  sw->add_flag("--cost-weighted", sw_cost_weighted,
               "weigh cost saving by per-record remote cost instead of request counts");
  sw->callback([&] {
    auto kind = cheapet::supervisor_from_string(sw_supervisor);
    auto format = cheapet::report_format_from_string(sw_format);
    auto mdsa = maybe_load_mdsa(kind, sw_mdsa);
    auto records = cheapet::read_trace(sw_trace);
    auto scores = cheapet::score_trace(records, kind, mdsa ? &*mdsa : nullptr);
    auto report = cheapet::sweep_curve(records, scores, !sw_cost_weighted, kind, sw_trace);
    cheapet::emit_report(report, format, sw_out);
    std::cout << nlohmann::json{
                     {"out", sw_out},
                     {"points", report.curve.size()},
                     {"local_only_accuracy", report.local_only_accuracy},
                     {"remote_only_accuracy", report.remote_only_accuracy},
                     {"best", cheapet::curve_point_to_json(
                                  report.curve[report.argmax_accuracy_index])},
                     {"min_match_remote", cheapet::curve_point_to_json(
                                              report.curve[report.min_match_remote_index])},
                     {"supervisor", to_string(kind)}}
                     .dump()
              << "\n";
  });

  // serve
  auto* serve = app.add_subcommand("serve", "run the routing gateway");
  std::string serve_config;
  serve->add_option("--config", serve_config, "gateway config file (TOML)")->required();
  serve->callback([&] { run_serve(serve_config); });

  // stub-remote
  auto* stub = app.add_subcommand("stub-remote", "run a deterministic fake remote endpoint");
  int stub_port = 0;
  cheapet::StubRemoteOptions stub_options;
  double stub_cost_units = -1.0;
  stub->add_option("--port", stub_port, "port to bind (default: any free port)");
  stub->add_option("--accuracy", stub_options.accuracy, "fraction of correct answers");
  stub->add_option("--latency-ms", stub_options.latency_ms, "artificial latency per request");
  stub->add_option("--failure-rate", stub_options.failure_rate,
                   "fraction of requests answered with a transient 500");
  stub->add_option("--seed", stub_options.seed, "seed for all injected randomness");
  stub->add_option("--classes", stub_options.num_classes, "number of output classes");
  stub->add_option("--cost-units", stub_cost_units,
                   "report this cost_units value instead of a token count");
  stub->add_option("--tokens", stub_options.tokens_per_request,
                   "token count reported per response (default 1000)");
  stub->callback([&] {
    if (stub_cost_units >= 0.0) stub_options.fixed_cost_units = stub_cost_units;
    run_stub_remote(stub_port, stub_options);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 64;
  } catch (const cheapet::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cheapet::RemoteUnavailableError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cheapet::PermanentRequestError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cheapet::ProtocolError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const cheapet::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
