#pragma once

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cohet/config.hpp"
#include "cohet/trainer.hpp"

namespace cohet::metrics {

inline std::vector<std::string> header(int n_agents) {
  std::vector<std::string> h{"iteration", "env_steps", "episodic_reward_mean", "episodic_reward_min",
                             "episodic_reward_max"};
  for (int i = 0; i < n_agents; ++i) {
    for (const char* c : {"intrinsic_reward_mean_", "dynamics_loss_", "policy_loss_", "value_loss_"}) {
      h.push_back(c + std::to_string(i));
    }
  }
  return h;
}

inline std::string join(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    if (k) out += ',';
    out += cells[k];
  }
  return out;
}

inline std::string format_value(double x) {
  if (std::isnan(x)) return "nan";
  return config_detail::fmt_double(x);
}

inline std::string format_row(const train::IterationMetrics& m) {
  std::vector<std::string> cells{std::to_string(m.iteration), std::to_string(m.env_steps),
                                 format_value(m.episodic_reward_mean), format_value(m.episodic_reward_min),
                                 format_value(m.episodic_reward_max)};
  for (std::size_t i = 0; i < m.intrinsic_reward_mean.size(); ++i) {
    cells.push_back(format_value(m.intrinsic_reward_mean[i]));
    cells.push_back(format_value(m.dynamics_loss[i]));
    cells.push_back(format_value(m.policy_loss[i]));
    cells.push_back(format_value(m.value_loss[i]));
  }
  return join(cells);
}

// Writes the header on open and flushes after every row, so an aborted run
// still leaves every completed iteration on disk.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, int n_agents) : out_(path, std::ios::trunc) {
    if (!out_) throw std::runtime_error("cannot write '" + path + "'");
    out_ << join(header(n_agents)) << '\n';
    out_.flush();
  }

  void append(const train::IterationMetrics& m) {
    out_ << format_row(m) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

// Parsed metrics.csv: column names plus rows of numbers.
struct Table {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  int column(const std::string& name) const {
    for (std::size_t k = 0; k < columns.size(); ++k) {
      if (columns[k] == name) return static_cast<int>(k);
    }
    return -1;
  }

  std::vector<double> series(const std::string& name) const {
    const int c = column(name);
    if (c < 0) throw std::out_of_range("no column '" + name + "'");
    std::vector<double> out;
    for (const auto& r : rows) out.push_back(r[static_cast<std::size_t>(c)]);
    return out;
  }

  int n_agents() const {
    int n = 0;
    while (column("dynamics_loss_" + std::to_string(n)) >= 0) ++n;
    return n;
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(config_detail::trim(cell));
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error(path + ": cannot read");
  Table t;
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  t.columns = split_csv_line(line);
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (config_detail::trim(line).empty()) continue;
    const auto cells = split_csv_line(line);
    if (cells.size() != t.columns.size()) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " +
                               std::to_string(t.columns.size()) + " columns, found " + std::to_string(cells.size()));
    }
    std::vector<double> row;
    for (std::size_t k = 0; k < cells.size(); ++k) {
      if (cells[k] == "nan") {
        row.push_back(std::nan(""));
        continue;
      }
      try {
        row.push_back(config_detail::to_double(cells[k]));
      } catch (const std::exception&) {
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": column '" + t.columns[k] +
                                 "' is not numeric: '" + cells[k] + "'");
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

}  // namespace cohet::metrics
