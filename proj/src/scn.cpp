#include "schanger/scn.hpp"

#include <cstdio>
#include <sstream>

#include "schanger/errors.hpp"

namespace schanger {

std::string InflationReport::table() const {
  std::ostringstream out;
  out << "path                                    shape            count  origin\n";
  for (const auto& row : rows) {
    char line[160];
    std::snprintf(line, sizeof(line), "%-38s %-14s %8lld  %s%s\n",
                  row.path.c_str(), row.shape.str().c_str(),
                  static_cast<long long>(row.count), row.origin.c_str(),
                  row.is_buffer ? " (buffer)" : "");
    out << line;
  }
  char buf[160];
  std::snprintf(buf, sizeof(buf),
                "copied %lld new %lld new-fraction %.2f%%\n",
                static_cast<long long>(copied_param_count),
                static_cast<long long>(new_param_count),
                100.0 * new_fraction());
  out << buf;
  return out.str();
}

InflationResult inflate(const BuiltModel& source, uint64_t seed) {
  if (source.graph.arch != "spnet") {
    throw ConfigError("inflate: source must be a single-temporal model, got " +
                      source.graph.arch);
  }

  InflationResult result;
  result.model = build_schanger(source.graph.variant, seed);
  ParamStore& dst = result.model.store;

  for (const auto& path : dst.paths()) {
    ParamEntry& e = dst.entry(path);
    InflationRow row;
    row.path = path;
    row.shape = e.tensor.shape();
    row.count = e.tensor.numel();
    row.is_buffer = e.is_buffer;
    if (e.is_tfm) {
      row.origin = "new";
      if (!e.is_buffer) result.report.new_param_count += row.count;
    } else {
      if (!source.store.has(path)) {
        throw ConfigError("inflate: source is missing shared path " + path);
      }
      const Tensor& src = source.store.get(path);
      if (!(src.shape() == e.tensor.shape())) {
        throw ConfigError("inflate: shape mismatch at " + path + ": " +
                          src.shape().str() + " vs " +
                          e.tensor.shape().str());
      }
      e.tensor.data() = src.data();
      row.origin = "copied";
      if (!e.is_buffer) result.report.copied_param_count += row.count;
    }
    result.report.rows.push_back(row);
  }
  return result;
}

void finetune_mode(ParamStore& store, const std::string& mode) {
  bool freeze_copied;
  if (mode == "full") {
    freeze_copied = false;
  } else if (mode == "new_only") {
    freeze_copied = true;
  } else {
    throw ConfigError("finetune_mode: unknown mode " + mode);
  }
  for (const auto& path : store.paths()) {
    ParamEntry& e = store.entry(path);
    e.frozen = freeze_copied && !e.is_tfm && !e.is_buffer;
  }
}

}  // namespace schanger
