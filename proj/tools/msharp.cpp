// SPDX-License-Identifier: Apache-2.0
// Command-line front end: run experiments, verify identities, serve a mock model.

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <msharp/msharp.hpp>

#ifndef MSHARP_DATA_DIR
#define MSHARP_DATA_DIR "data/toy"
#endif

namespace {

msharp::remote::MockServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Marginal sharpening decoders on tabular toy models"};
  app.require_subcommand(1);

  msharp::ExperimentConfig cfg;
  std::string method = "marginal";
  bool no_resample = false, no_cache = false;
  auto* run = app.add_subcommand("run", "Run an experiment and write a JSON report (plus CSV)");
  run->add_option("--model", cfg.model_path, "Toy model JSON file")->envname("MSHARP_MODEL");
  run->add_option("--server", cfg.server_url, "Logprobs server URL, e.g. http://127.0.0.1:8080")
      ->envname("MSHARP_SERVER");
  run->add_option("--prompt", cfg.prompt_ids, "Prompt ids (default: all)")->delimiter(',')->envname("MSHARP_PROMPT");
  run->add_option("--method", method, "temperature | majority-vote | marginal | sis | joint-exact")
      ->envname("MSHARP_METHOD")
      ->check(CLI::IsMember({"temperature", "majority-vote", "marginal", "sis", "joint-exact"}))
      ->capture_default_str();
  run->add_option("--K", cfg.K, "Sharpening strength(s), comma separated")
      ->delimiter(',')->envname("MSHARP_K")->capture_default_str();
  run->add_option("--S", cfg.S, "Trace groups, comma separated")
      ->delimiter(',')->envname("MSHARP_S")->capture_default_str();
  run->add_option("--budget", cfg.budget, "Sweep every K*S factorization of this budget")
      ->envname("MSHARP_BUDGET");
  run->add_option("--L", cfg.L, "Maximum generation length")->envname("MSHARP_L")->capture_default_str();
  run->add_option("--k", cfg.k, "Majority-vote sample count")->envname("MSHARP_VOTES")->capture_default_str();
  run->add_option("--P", cfg.P, "SIS particle count")->envname("MSHARP_P")->capture_default_str();
  run->add_flag("--no-resample", no_resample, "Disable SIS resampling")->envname("MSHARP_NO_RESAMPLE");
  run->add_option("--alpha", cfg.alpha, "Joint sharpening exponent")->envname("MSHARP_ALPHA")->capture_default_str();
  run->add_option("--trials", cfg.trials, "Trials per prompt")->envname("MSHARP_TRIALS")->capture_default_str();
  run->add_option("--seed", cfg.seed, "Master seed")->envname("MSHARP_SEED")->capture_default_str();
  run->add_option("--top-l", cfg.top_l, "Remote top-L truncation (0 = full vocabulary)")
      ->envname("MSHARP_TOP_L")->capture_default_str();
  run->add_flag("--no-cache", no_cache, "Disable the remote client cache")->envname("MSHARP_NO_CACHE");
  run->add_option("--threads", cfg.threads, "Worker threads (0 = hardware)")->envname("MSHARP_THREADS");
  run->add_option("--out", cfg.out_path, "Report path; the CSV goes next to it")->envname("MSHARP_OUT");

  std::string data_dir = MSHARP_DATA_DIR;
  auto* verify = app.add_subcommand("verify", "Check oracle identities against the bundled fixtures");
  verify->add_option("--data", data_dir, "Directory holding t1.json, t2.json, t3.json")
      ->envname("MSHARP_DATA_DIR")->capture_default_str();

  std::string serve_model, host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve-mock", "Serve a toy model over the logprobs protocol");
  serve->add_option("--model", serve_model, "Toy model JSON file")->envname("MSHARP_MODEL")->required();
  serve->add_option("--host", host, "Bind address")->envname("MSHARP_HOST")->capture_default_str();
  serve->add_option("--port", port, "Port (0 = any)")->envname("MSHARP_PORT")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      cfg.method = msharp::parse_method(method);
      cfg.resample = !no_resample;
      cfg.cache = !no_cache;
      const auto report = msharp::run_experiment(cfg);
      if (cfg.out_path.empty()) {
        std::cout << msharp::to_json(report).dump(2) << '\n';
      } else {
        std::cout << msharp::to_csv(report);
      }
      return 0;
    }
    if (*verify) {
      const auto report = msharp::verify_suite(data_dir);
      std::cout << report.table();
      if (report.passed()) return 0;
      std::cerr << "failed checks:";
      for (const auto& name : report.failed()) std::cerr << ' ' << '"' << name << '"';
      std::cerr << '\n';
      return 1;
    }
    if (*serve) {
      const auto model = msharp::load_toy_model(serve_model);
      msharp::remote::MockServer server(model, host, port);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cout << "serving " << serve_model << " at " << server.url() << std::endl;
      server.wait();
      g_server = nullptr;
      return 0;
    }
  } catch (const msharp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
