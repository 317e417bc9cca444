#include "mce/report.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "mce/errors.hpp"

namespace mce {

namespace {

using nlohmann::json;

json to_json_obj(const TrialResult& r) {
  json j;
  j["method"] = r.method;
  j["bias"] = r.bias;
  j["seed"] = r.seed;
  j["trial_index"] = r.trial_index;
  j["diverged"] = r.diverged;
  if (r.ood_acc) j["ood_acc"] = *r.ood_acc;
  if (r.id_acc) j["id_acc"] = *r.id_acc;
  if (r.ood_acc_pruned) j["ood_acc_pruned"] = *r.ood_acc_pruned;
  j["wall_time_s"] = r.wall_time_s;
  j["epochs"] = r.epochs;
  j["config_hash"] = r.config_hash;
  if (!r.extra.empty()) j["extra"] = r.extra;
  return j;
}

TrialResult from_json_obj(const json& j) {
  TrialResult r;
  r.method = j.at("method").get<std::string>();
  r.bias = j.at("bias").get<std::string>();
  r.seed = j.at("seed").get<uint64_t>();
  r.trial_index = j.value("trial_index", 0);
  r.diverged = j.value("diverged", false);
  if (j.contains("ood_acc")) r.ood_acc = j["ood_acc"].get<double>();
  if (j.contains("id_acc")) r.id_acc = j["id_acc"].get<double>();
  if (j.contains("ood_acc_pruned")) r.ood_acc_pruned = j["ood_acc_pruned"].get<double>();
  r.wall_time_s = j.value("wall_time_s", 0.0);
  r.epochs = j.value("epochs", 0);
  r.config_hash = j.value("config_hash", uint64_t{0});
  if (j.contains("extra")) r.extra = j["extra"].get<std::map<std::string, double>>();
  return r;
}

std::string fmt_acc(const std::optional<double>& v) {
  if (!v) return "";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", *v);
  return buf;
}

}  // namespace

std::string trial_to_json(const TrialResult& r) { return to_json_obj(r).dump(2) + "\n"; }

TrialResult trial_from_json(const std::string& text) {
  try {
    return from_json_obj(json::parse(text));
  } catch (const json::exception& e) {
    throw IoError(std::string("bad trial record: ") + e.what());
  }
}

std::string render_csv(const std::vector<TrialResult>& results) {
  std::string out = "method,bias,seed,ood_acc,id_acc,ood_acc_pruned,diverged,wall_time\n";
  for (const auto& r : results) {
    char line[256];
    std::snprintf(line, sizeof(line), "%s,%s,%" PRIu64 ",%s,%s,%s,%d,0.000\n", r.method.c_str(),
                  r.bias.c_str(), r.seed, fmt_acc(r.ood_acc).c_str(), fmt_acc(r.id_acc).c_str(),
                  fmt_acc(r.ood_acc_pruned).c_str(), r.diverged ? 1 : 0);
    out += line;
  }
  return out;
}

std::string render_json(const std::vector<TrialResult>& results) {
  json arr = json::array();
  for (const auto& r : results) arr.push_back(to_json_obj(r));
  return arr.dump(2) + "\n";
}

const AggregateCell* AggregateReport::find(const std::string& method,
                                           const std::string& bias) const {
  for (const auto& [m, b, cell] : cells) {
    if (m == method && b == bias) return &cell;
  }
  return nullptr;
}

AggregateReport aggregate(const std::vector<TrialResult>& results) {
  AggregateReport report;
  auto cell_for = [&](const std::string& m, const std::string& b) -> AggregateCell& {
    for (auto& [cm, cb, cell] : report.cells) {
      if (cm == m && cb == b) return cell;
    }
    report.cells.emplace_back(m, b, AggregateCell{});
    return std::get<2>(report.cells.back());
  };

  // Two passes: means, then standard deviations over surviving trials.
  for (const auto& r : results) {
    auto& cell = cell_for(r.method, r.bias);
    if (r.diverged || !r.ood_acc || !r.id_acc) {
      ++cell.diverged;
      continue;
    }
    ++cell.n;
    cell.ood_mean += *r.ood_acc;
    cell.id_mean += *r.id_acc;
    if (r.ood_acc_pruned) cell.pruned_mean = cell.pruned_mean.value_or(0.0) + *r.ood_acc_pruned;
  }
  for (auto& [m, b, cell] : report.cells) {
    if (cell.n == 0) continue;
    cell.ood_mean /= cell.n;
    cell.id_mean /= cell.n;
    if (cell.pruned_mean) *cell.pruned_mean /= cell.n;
  }
  for (const auto& r : results) {
    if (r.diverged || !r.ood_acc || !r.id_acc) continue;
    auto& cell = cell_for(r.method, r.bias);
    cell.ood_std += (*r.ood_acc - cell.ood_mean) * (*r.ood_acc - cell.ood_mean);
    cell.id_std += (*r.id_acc - cell.id_mean) * (*r.id_acc - cell.id_mean);
  }
  for (auto& [m, b, cell] : report.cells) {
    if (cell.n > 1) {
      cell.ood_std = std::sqrt(cell.ood_std / (cell.n - 1));
      cell.id_std = std::sqrt(cell.id_std / (cell.n - 1));
    } else {
      cell.ood_std = cell.id_std = 0.0;
    }
  }
  return report;
}

std::string render_markdown(const std::vector<TrialResult>& results) {
  const AggregateReport report = aggregate(results);

  std::vector<std::string> methods, biases;
  for (const auto& [m, b, cell] : report.cells) {
    if (std::find(methods.begin(), methods.end(), m) == methods.end()) methods.push_back(m);
    if (std::find(biases.begin(), biases.end(), b) == biases.end()) biases.push_back(b);
  }

  std::ostringstream out;
  out << "| Method |";
  for (const auto& b : biases) out << " " << b << " OOD | " << b << " ID |";
  out << "\n|---|";
  for (size_t i = 0; i < biases.size(); ++i) out << "---|---|";
  out << "\n";
  char buf[64];
  for (const auto& m : methods) {
    out << "| " << m << " |";
    for (const auto& b : biases) {
      const AggregateCell* cell = report.find(m, b);
      if (cell == nullptr || cell->n == 0) {
        out << " - | - |";
        continue;
      }
      std::snprintf(buf, sizeof(buf), " %.2f ± %.2f (n=%d) |", 100.0 * cell->ood_mean,
                    100.0 * cell->ood_std, cell->n);
      out << buf;
      std::snprintf(buf, sizeof(buf), " %.2f ± %.2f |", 100.0 * cell->id_mean,
                    100.0 * cell->id_std);
      out << buf;
    }
    out << "\n";
  }
  int total_diverged = 0;
  for (const auto& [m, b, cell] : report.cells) total_diverged += cell.diverged;
  if (total_diverged > 0) {
    out << "\n" << total_diverged << " diverged trial(s) excluded from the means.\n";
  }
  return out.str();
}

void write_text_atomic(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out << content;
    if (!out.good()) throw IoError("short write to " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

}  // namespace mce
