// hermflow: run, verify and inspect flows on flat complex tori.
//
// Exit codes for `run`: 0 Converged/MaxTime, 2 PositivityLost, 3 Diverged,
// 1 configuration or IO errors.

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <iostream>
#include <map>
#include <set>

#include "CLI11.hpp"
#include "hermflow/hermflow.hpp"

namespace {

using namespace hermflow;

int run_one(const std::string& config_path, const std::string& out_dir) {
  ScenarioConfig cfg;
  try {
    cfg = load_config(config_path);
  } catch (const std::exception& e) {
    std::cerr << config_path << ": " << e.what() << '\n';
    return 1;
  }
  const RunOutcome r = cli_run(cfg, out_dir);
  const std::string dir = out_dir.empty() ? cfg.output_dir : out_dir;
  if (!r.error.empty()) {
    std::cerr << config_path << ": " << r.error << '\n';
  } else {
    const auto& s = r.run.final_state;
    std::cout << config_path << ": " << to_string(s.status) << " t=" << fmt17(s.t) << " steps=" << s.steps
              << " |Q|=" << (r.run.series.empty() ? 0.0 : r.run.series.back().norm_Q_L2) << " -> " << dir << '\n';
  }
  return r.exit_code;
}

// One child process per config, at most `jobs` at a time. Returns the largest
// child exit code.
int run_batch(const std::vector<std::string>& configs, int jobs) {
  std::set<std::string> dirs;
  for (const auto& c : configs) {
    try {
      const auto d = fs::weakly_canonical(load_config(c).output_dir).string();
      if (!dirs.insert(d).second) {
        std::cerr << "batch: output_dir " << d << " is shared by several configs\n";
        return 1;
      }
    } catch (const std::exception& e) {
      std::cerr << c << ": " << e.what() << '\n';
      return 1;
    }
  }
  std::map<pid_t, std::string> running;
  std::size_t next = 0;
  int worst = 0;
  std::cout.flush();
  while (next < configs.size() || !running.empty()) {
    while (next < configs.size() && static_cast<int>(running.size()) < jobs) {
      const pid_t pid = fork();
      if (pid < 0) {
        std::perror("fork");
        return 1;
      }
      if (pid == 0) {
        execl("/proc/self/exe", "hermflow", "run", configs[next].c_str(), static_cast<char*>(nullptr));
        std::perror("execl");
        _exit(1);
      }
      running[pid] = configs[next++];
    }
    int status = 0;
    const pid_t done = wait(&status);
    if (done < 0) break;
    const int code = WIFEXITED(status) ? WEXITSTATUS(status) : 1;
    worst = std::max(worst, code);
    running.erase(done);
  }
  return worst;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Flow of Hermitian metrics on flat complex tori"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "integrate one or more scenario configs");
  std::vector<std::string> configs;
  std::string out_dir;
  int jobs = 1;
  run->add_option("configs", configs, "scenario JSON files")->required()->check(CLI::ExistingFile);
  run->add_option("--out", out_dir, "output directory (single config only)");
  run->add_option("--jobs,-j", jobs, "parallel processes for several configs")->check(CLI::PositiveNumber);

  auto* verify = app.add_subcommand("verify", "run the hypothesis and oracle checks");
  std::string report_path;
  verify->add_option("--out", report_path, "also write the JSON report here");

  auto* spectrum_cmd = app.add_subcommand("spectrum", "spectrum of the linearized operator for a config's grid");
  std::string spectrum_config;
  bool dense = false, full = false;
  spectrum_cmd->add_option("config", spectrum_config)->required()->check(CLI::ExistingFile);
  spectrum_cmd->add_flag("--dense", dense, "finite-difference Jacobian at the initial condition (grids <= 4096 points)");
  spectrum_cmd->add_flag("--full", full, "include every eigenvalue");

  auto* analyze = app.add_subcommand("analyze", "decay fit, residuals and plot for a run directory");
  std::string analyze_dir;
  analyze->add_option("dir", analyze_dir)->required();

  auto* plot = app.add_subcommand("plot", "SVG plots for a run directory");
  std::string plot_dir;
  plot->add_option("dir", plot_dir)->required();

  app.add_subcommand("oracle", "print the frozen conventions");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      if (configs.size() > 1) {
        if (!out_dir.empty()) {
          std::cerr << "--out applies to a single config\n";
          return 1;
        }
        return run_batch(configs, jobs);
      }
      return run_one(configs.front(), out_dir);
    }
    if (*verify) {
      const ojson report = cli_verify();
      std::cout << report.dump(2) << '\n';
      if (!report_path.empty()) write_json(report_path, report);
      return report.at("pass").get<bool>() ? 0 : 1;
    }
    if (*spectrum_cmd) {
      const ScenarioConfig cfg = load_config(spectrum_config);
      const auto grid = make_grid(cfg);
      SpectrumReport rep;
      if (dense) {
        const Eigen::MatrixXd J = jacobian_fd(operator_for(cfg), dealiased(make_initial_condition(cfg, grid)));
        rep = spectrum(dense_handle(grid, J));
      } else {
        rep = flat_spectrum(grid);
      }
      std::cout << (full ? rep.to_json(true) : spectrum_json(rep)).dump(2) << '\n';
      return 0;
    }
    if (*analyze) {
      std::cout << cli_analyze(analyze_dir).dump(2) << '\n';
      return 0;
    }
    if (*plot) {
      cli_plot(plot_dir);
      return 0;
    }
    std::cout << cli_oracle().dump(2) << '\n';
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "hermflow: " << e.what() << '\n';
    return 1;
  }
}
