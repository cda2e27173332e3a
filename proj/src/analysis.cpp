#include "schanger/analysis.hpp"

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>

#include "schanger/errors.hpp"

namespace schanger {

PaperRef paper_ref(const std::string& variant) {
  if (variant == "small") return PaperRef{0.607, 6.242, 0.026};
  if (variant == "base") return PaperRef{2.370, 18.275, 0.105};
  return PaperRef{};
}

int64_t count_params(const ModelGraph& graph) {
  int64_t total = 0;
  for (const auto& row : graph.layers) total += row.params;
  return total;
}

namespace {

void check_input_size(int h, int w) {
  if (h < 16 || w < 16 || h % 16 != 0 || w % 16 != 0) {
    throw ConfigError("count_macs: input size must be a multiple of 16");
  }
}

int64_t row_macs(const LayerSpec& row, int h, int w) {
  int64_t spatial = row.unit_spatial
                        ? 1
                        : (static_cast<int64_t>(h) / row.ratio) *
                              (static_cast<int64_t>(w) / row.ratio);
  switch (row.kind) {
    case LayerKind::Conv: {
      int64_t per_out = static_cast<int64_t>(row.in_ch / row.groups) *
                        row.kh * row.kw;
      int64_t macs = spatial * row.out_ch * per_out;
      if (row.bias) macs += spatial * row.out_ch;
      return macs * row.streams;
    }
    case LayerKind::Norm:
    case LayerKind::Act:
    case LayerKind::Elementwise:
    case LayerKind::Resize:
      return spatial * row.out_ch * row.streams;
    case LayerKind::Pool:
      return 0;  // comparisons, not multiply-adds
  }
  return 0;
}

std::string section_of(const std::string& path) {
  auto dot = path.find('.');
  return dot == std::string::npos ? path : path.substr(0, dot);
}

std::string percent(double err) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.1f%%", 100.0 * err);
  return buf;
}

}  // namespace

int64_t count_macs(const ModelGraph& graph, int input_h, int input_w) {
  check_input_size(input_h, input_w);
  int64_t total = 0;
  for (const auto& row : graph.layers) {
    total += row_macs(row, input_h, input_w);
  }
  return total;
}

AnalysisReport analyze_graph(const ModelGraph& graph, int input_h,
                             int input_w) {
  AnalysisReport r;
  r.params = count_params(graph);
  r.macs = count_macs(graph, input_h, input_w);
  r.flops_primary = kFlopsMultiplierPrimary * static_cast<double>(r.macs);
  r.flops_alternate = kFlopsMultiplierAlternate * static_cast<double>(r.macs);
  PaperRef ref = paper_ref(graph.variant.name);
  if (graph.arch == "schanger" && ref.params_m > 0.0) {
    r.has_reference = true;
    double pref = ref.params_m * 1e6;
    double fref = ref.flops_g * 1e9;
    r.params_err = (static_cast<double>(r.params) - pref) / pref;
    r.flops_err_primary = (r.flops_primary - fref) / fref;
    r.flops_err_alternate = (r.flops_alternate - fref) / fref;
    r.params_ok = std::abs(r.params_err) <= kParamTolerance;
    r.flops_ok = std::abs(r.flops_err_primary) <= kFlopsTolerance ||
                 std::abs(r.flops_err_alternate) <= kFlopsTolerance;
  }
  return r;
}

std::string emit_table(const ModelGraph& graph, int input_h, int input_w) {
  AnalysisReport r = analyze_graph(graph, input_h, input_w);
  const auto& C = graph.variant.channels;
  std::ostringstream out;
  out << "arch " << graph.arch << "  variant " << graph.variant.name
      << "  input " << input_h << "x" << input_w << "\n";
  out << "channels (" << C[0];
  for (int i = 1; i < 6; ++i) out << "," << C[i];
  out << ")  ratios (1,1,2,4,8,16)\n";

  std::map<std::string, int64_t> section_params;
  std::map<std::string, int64_t> section_macs;
  std::vector<std::string> section_order;
  for (const auto& row : graph.layers) {
    std::string sec = section_of(row.path);
    if (!section_params.count(sec)) section_order.push_back(sec);
    section_params[sec] += row.params;
    section_macs[sec] += row_macs(row, input_h, input_w);
  }
  out << "section            params        macs\n";
  for (const auto& sec : section_order) {
    char line[96];
    std::snprintf(line, sizeof(line), "%-16s %10lld %11lld\n", sec.c_str(),
                  static_cast<long long>(section_params[sec]),
                  static_cast<long long>(section_macs[sec]));
    out << line;
  }

  char buf[160];
  std::snprintf(buf, sizeof(buf), "total params %lld (%.4f M)",
                static_cast<long long>(r.params), r.params / 1e6);
  out << buf;
  if (r.has_reference) {
    std::snprintf(buf, sizeof(buf), "  reference %.3f M  delta %s",
                  paper_ref(graph.variant.name).params_m,
                  percent(r.params_err).c_str());
    out << buf;
  }
  out << "\n";
  std::snprintf(buf, sizeof(buf), "total macs %.4f G\n", r.macs / 1e9);
  out << buf;
  std::snprintf(buf, sizeof(buf), "flops %.4f G at %.0fx MACs",
                r.flops_primary / 1e9, kFlopsMultiplierPrimary);
  out << buf;
  if (r.has_reference) {
    std::snprintf(buf, sizeof(buf), "  reference %.3f G  delta %s",
                  paper_ref(graph.variant.name).flops_g,
                  percent(r.flops_err_primary).c_str());
    out << buf;
  }
  out << "\n";
  std::snprintf(buf, sizeof(buf), "flops %.4f G at %.0fx MACs",
                r.flops_alternate / 1e9, kFlopsMultiplierAlternate);
  out << buf;
  if (r.has_reference) {
    std::snprintf(buf, sizeof(buf), "  reference %.3f G  delta %s",
                  paper_ref(graph.variant.name).flops_g,
                  percent(r.flops_err_alternate).c_str());
    out << buf;
  }
  out << "\n";
  return out.str();
}

void reconcile_or_throw(const ModelGraph& graph, int input_h, int input_w) {
  AnalysisReport r = analyze_graph(graph, input_h, input_w);
  if (!r.has_reference) return;
  if (!r.params_ok) {
    throw ReconcileError("parameter total " + std::to_string(r.params) +
                         " misses reference by " + percent(r.params_err));
  }
  if (!r.flops_ok) {
    throw ReconcileError(
        "flops total misses reference under every declared convention (" +
        percent(r.flops_err_primary) + " at 2x, " +
        percent(r.flops_err_alternate) + " at 1x)");
  }
}

}  // namespace schanger
