#pragma once

#include <cstdint>
#include <string>

#include "schanger/modelgraph.hpp"

namespace schanger {

// Published totals used as reconciliation references.
struct PaperRef {
  double params_m = 0.0;   // millions
  double flops_g = 0.0;    // units of 1e9 under the 1x MAC convention
  double delta_m = 0.0;    // new-parameter budget of the Siamese model
};
PaperRef paper_ref(const std::string& variant);

constexpr double kParamTolerance = 0.05;
constexpr double kFlopsTolerance = 0.15;
// flops = multiplier * MACs. Primary convention multiplies by two
// (one multiply plus one add); the alternate counts MACs directly.
constexpr double kFlopsMultiplierPrimary = 2.0;
constexpr double kFlopsMultiplierAlternate = 1.0;

int64_t count_params(const ModelGraph& graph);

// Multiply-accumulate count at a given input size. Convs count
// spatial*cout*(cin/groups)*k^2 (+spatial*cout when biased); norms,
// activations, elementwise ops and resizes count one MAC per output
// element; max pooling counts zero.
int64_t count_macs(const ModelGraph& graph, int input_h, int input_w);

struct AnalysisReport {
  int64_t params = 0;
  int64_t macs = 0;
  double flops_primary = 0.0;
  double flops_alternate = 0.0;
  double params_err = 0.0;          // relative error vs reference
  double flops_err_primary = 0.0;
  double flops_err_alternate = 0.0;
  bool has_reference = false;
  bool params_ok = true;
  bool flops_ok = true;  // some declared convention within tolerance
};
AnalysisReport analyze_graph(const ModelGraph& graph, int input_h,
                             int input_w);

// Per-section ledger plus totals and reference comparisons, one-decimal
// percentages.
std::string emit_table(const ModelGraph& graph, int input_h, int input_w);

// Throws ReconcileError when a referenced variant misses tolerance.
void reconcile_or_throw(const ModelGraph& graph, int input_h, int input_w);

}  // namespace schanger
