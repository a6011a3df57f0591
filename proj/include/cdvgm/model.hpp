#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "cdvgm/gradcheck.hpp"
#include "cdvgm/graph_ops.hpp"
#include "cdvgm/temporal_ops.hpp"
#include "cdvgm/tensor.hpp"

namespace cdvgm::model {

enum class HeadMode { tcn, conv };
enum class FusionSplit { half_time, full_copy };
// Which batch element(s) summarize the input for Laplacian construction.
enum class LaplacianSummary { first, mean };

struct ModelConfig {
  std::size_t n_nodes = 0;
  std::size_t n_features = 1;
  std::size_t t_in = 12;
  std::size_t t_out = 12;
  std::size_t n_blocks = 3;
  std::size_t channels = 64;
  std::size_t cheby_k = 4;
  double theta = 0.5;
  double leaky_slope = 0.01;
  HeadMode head_mode = HeadMode::tcn;
  bool ts_enabled = true;
  bool tcn_enabled = true;
  std::size_t tcn_layers = 2;
  std::size_t tcn_kernel = 3;
  graph::ChebyRescale cheby_rescale = graph::ChebyRescale::rowsum;
  graph::LaplacianUpdateMode laplacian_update_mode = graph::LaplacianUpdateMode::scalar_mean;
  FusionSplit fusion_split = FusionSplit::half_time;
  LaplacianSummary laplacian_summary = LaplacianSummary::first;

  void validate() const;
  // t_in == t_out == 12, the standard one-hour protocol.
  bool standard_protocol() const { return t_in == 12 && t_out == 12; }
  // tcn_enabled = false forces the convolutional head.
  HeadMode effective_head() const { return tcn_enabled ? head_mode : HeadMode::conv; }
  bool operator==(const ModelConfig&) const = default;

  std::map<std::string, std::string> to_kv() const;
  // Keys not present keep their defaults; unknown keys are ignored here
  // (the run-config layer rejects them).
  static ModelConfig from_kv(const std::map<std::string, std::string>& kv);
  static const std::vector<std::string>& keys();
};

std::string to_string(HeadMode m);
std::string to_string(FusionSplit m);
std::string to_string(LaplacianSummary m);
HeadMode parse_head_mode(const std::string& s);
FusionSplit parse_fusion_split(const std::string& s);
LaplacianSummary parse_laplacian_summary(const std::string& s);

struct FeatureTransformParams {
  Tensor w;          // [C, F]
  Tensor b;          // [C]
  Tensor summary_w;  // [1, F]
  Tensor summary_b;  // [1]
};

struct FeatureTransformOutput {
  Tensor hidden;   // [B, C, N, T]
  Tensor summary;  // [N, T], values in (0, 1)
};

// hidden = leaky_relu(conv1x1(x)); summary = sigmoid(conv1x1 to one channel),
// reduced over the batch per `mode`.
FeatureTransformOutput feature_transform(const Tensor& x, const FeatureTransformParams& p, LaplacianSummary mode,
                                         double slope = 0.01);

struct CstBlockParams {
  graph::ChebyParams cheby;
  temporal::Lt2sParams lt2s;
  temporal::AttentionParams attention;
  Tensor agg_w;       // [C, C]
  Tensor agg_b;       // [C]
  Tensor norm_gamma;  // [C]
  Tensor norm_beta;   // [C]
};

struct BlockOptions {
  graph::ChebyRescale rescale = graph::ChebyRescale::rowsum;
  bool ts_enabled = true;
  double slope = 0.01;
};

// Spatial path (Chebyshev on L_v) and temporal path (LT2S + attention) over
// the same input, aggregated and folded back with residual + layer norm over
// the channel axis.
Tensor cst_block(const Tensor& x_in, const Tensor& l_v, CstBlockParams& p, const BlockOptions& opts, bool training);

struct FusionParams {
  Tensor head_w, head_b;  // first-half projection [C, C], [C]
  Tensor tail_w, tail_b;  // second-half projection
  temporal::TcnParams tcn;  // used by HeadMode::tcn
  Tensor conv_w, conv_b;    // used by HeadMode::conv
  Tensor out_w;             // [T', C * S]
  Tensor out_b;             // [T']
};

struct FusionOptions {
  FusionSplit split = FusionSplit::half_time;
  HeadMode head = HeadMode::tcn;
  double slope = 0.01;
};

// [B, C, N, T] -> [B, N, T'].
Tensor fusion_layer(const Tensor& x_st, const FusionParams& p, const FusionOptions& opts);

// Values observed during one forward pass.
struct ForwardTrace {
  Tensor summary;
  std::vector<Tensor> laplacians;  // L_v fed to each block, in order
};

class CdvgmModel {
 public:
  CdvgmModel(ModelConfig config, std::uint64_t seed);
  CdvgmModel(const CdvgmModel&) = delete;
  CdvgmModel& operator=(const CdvgmModel&) = delete;
  CdvgmModel(CdvgmModel&&) = default;
  CdvgmModel& operator=(CdvgmModel&&) = default;

  // Deep copy with independent storage.
  CdvgmModel clone() const;

  // x [B, F, N, T_in] (raw magnitudes) -> [B, N, T_out].
  Tensor forward(const Tensor& x, bool training, ForwardTrace* trace = nullptr);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor> parameters() const;
  std::size_t parameter_count() const;

  // Batch-norm running moments, by name.
  std::vector<std::pair<std::string, std::vector<double>*>> buffers();

  FeatureTransformParams& feature() { return feature_; }
  graph::DvglParams& dvgl() { return dvgl_; }
  std::vector<CstBlockParams>& blocks() { return blocks_; }
  FusionParams& fusion() { return fusion_; }

 private:
  ModelConfig config_;
  FeatureTransformParams feature_;
  graph::DvglParams dvgl_;
  std::vector<CstBlockParams> blocks_;
  FusionParams fusion_;
};

// Versioned binary container: config header, named float64 blobs for
// parameters and buffers, generator state and free-form metadata.
struct CheckpointData {
  ModelConfig config;
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> params;
  std::vector<std::pair<std::string, std::vector<double>>> buffers;
  std::string rng_state;
};

void save_checkpoint(const std::string& path, CdvgmModel& model, const std::map<std::string, std::string>& metadata,
                     const std::string& rng_state);
CheckpointData read_checkpoint(const std::string& path);
// Rebuilds a model from checkpoint contents; throws DataError on any missing
// or mis-shaped blob.
CdvgmModel model_from_checkpoint(const CheckpointData& ckpt);
// Copies parameter and buffer values from `src` into `dst` (same config).
void copy_state(CdvgmModel& src, CdvgmModel& dst);
// Throws DataError naming every differing field.
void require_compatible(const ModelConfig& expected, const ModelConfig& actual);

}  // namespace cdvgm::model
