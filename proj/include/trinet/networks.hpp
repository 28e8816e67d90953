#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "trinet/graph.hpp"
#include "trinet/param_store.hpp"
#include "trinet/rng.hpp"

namespace trinet {

// ---------------------------------------------------------------------------
// Mask algebra.
//
// The generator's dense stack carries one attention mask per parameter tensor
// per task: m = sigmoid(s * e), embeddings e initialized to zero so every
// mask starts at 0.5. While a task trains, its embeddings are ordinary
// parameters (named embedding_name()) and s anneals from 1 to scale_max.
// When the task ends the mask values are materialized (optionally binarized)
// and later tasks see them only as constants: the cumulative elementwise max
// over frozen tasks protects earlier tasks' weights through gradient gating.

class MaskSet {
 public:
  double scale_max = 400.0;
  double binarize_threshold = 0.5;
  bool binarize_frozen = true;

  void register_maskable(const std::string& pname, Shape shape);
  const std::vector<std::string>& maskable() const { return order_; }
  const Shape& shape_of(const std::string& pname) const;

  // Creates zero embeddings for task t in the store (t is 1-based).
  void start_task(int t, ParameterStore& ps) const;
  static std::string embedding_name(int task, const std::string& pname);

  // Materializes task t's masks at scale_max from its embeddings.
  void freeze_task(int t, const ParameterStore& ps);
  int frozen_tasks() const { return static_cast<int>(frozen_.size()); }
  const Tensor& frozen_mask(int t, const std::string& pname) const;
  void set_frozen(int t, std::map<std::string, Tensor> masks);  // checkpoint load

  // Elementwise running max over frozen tasks 1..t. Errors when t == 0.
  Tensor cumulative(const std::string& pname, int t) const;

  // 1 - cumulative(1..t); all-ones when t == 0 (nothing to protect).
  Tensor gate(const std::string& pname, int t) const;

 private:
  std::vector<std::string> order_;
  std::map<std::string, Shape> shapes_;
  std::vector<std::map<std::string, Tensor>> frozen_;  // [task-1]
};

// R_M = sum_i m_t,i (1 - m_prev,i) / sum_i (1 - m_prev,i); 0 when the
// denominator vanishes. Tensors are aligned pairs over maskable parameters.
double mask_sparsity_penalty(const std::vector<Tensor>& current,
                             const std::vector<Tensor>& prev_cumulative);

struct MaskUsageRow {
  std::string layer;
  double used = 0.0;       // fraction above threshold in the cumulative mask
  double exclusive = 0.0;  // claimed by exactly one task
  double shared = 0.0;     // claimed by two or more tasks
  double free = 0.0;
};
std::vector<MaskUsageRow> mask_usage_report(const MaskSet& masks, int t);

// ---------------------------------------------------------------------------
// Networks. These are architecture descriptors plus graph builders; all
// parameter state lives in the ParameterStore under the network's prefix.

enum class MaskMode { train, frozen, binary };

struct GenBuild {
  int out = -1;                          // sample node [B, data_dim]
  std::map<std::string, int> mask_nodes; // train mode: mask node per parameter
};

class GeneratorNet {
 public:
  std::size_t latent_dim = 8;
  std::size_t embed_dim = 4;
  std::size_t data_dim = 2;
  std::vector<std::size_t> hidden{64, 64};
  double leaky_slope = 0.2;
  bool tanh_output = false;

  MaskSet mask_set;

  void init_params(ParameterStore& ps, Rng& rng);
  // Registers embedding rows for new classes; class ids are global and
  // owned by task `task` (1-based).
  void add_classes(ParameterStore& ps, Rng& rng, int task, const std::vector<int>& class_ids);

  int task_of_class(int c) const;
  int num_classes() const { return static_cast<int>(class_task_.size()); }
  const std::vector<int>& class_tasks() const { return class_task_; }
  void set_class_tasks(std::vector<int> ct) { class_task_ = std::move(ct); }

  // Builds G(z, c) for one task's mask regime. z: [B, latent_dim] input node,
  // onehot: [B, num_classes] input node. In train mode the current task's
  // masks are differentiable and scaled by the scalar input named
  // scale_input; other modes use materialized masks.
  GenBuild build(Graph& g, int z_node, int onehot_node, int task, MaskMode mode,
                 const std::string& scale_input = "mask_scale") const;

  // Single-sample convenience: builds a [1,*] graph and evaluates it.
  Tensor generate(const ParameterStore& ps, const Tensor& z, int class_id,
                  MaskMode mode, double train_scale = 1.0) const;

  std::vector<std::string> param_names() const;       // dense stack + embedding
  std::vector<std::string> maskable_names() const;    // dense stack only
  static constexpr const char* embed_table = "G.embed";

 private:
  std::vector<int> class_task_;  // task owning each global class id
};

class CriticNet {
 public:
  std::size_t in_dim = 2;
  std::vector<std::size_t> hidden{64, 64};
  double leaky_slope = 0.2;

  void init_params(ParameterStore& ps, Rng& rng);
  // Adds aux-head columns for new classes; existing columns are preserved
  // bit-exactly. Errors when new_total <= current width.
  void expand_output_layer(ParameterStore& ps, Rng& rng, int new_total_classes);
  int num_classes() const { return num_classes_; }
  void set_num_classes(int k) { num_classes_ = k; }

  int build_trunk(Graph& g, int x) const;
  int critic_score(Graph& g, int x) const;   // [B,1], no sigmoid
  int aux_logits(Graph& g, int x) const;     // [B,K]

  // Numeric conveniences for one sample.
  double score_one(const ParameterStore& ps, const std::vector<double>& x) const;
  std::vector<double> aux_probs_one(const ParameterStore& ps, const std::vector<double>& x) const;

  std::vector<std::string> trunk_names() const;
  std::vector<std::string> critic_head_names() const;
  std::vector<std::string> aux_head_names() const;

 private:
  int num_classes_ = 0;
};

class ClassifierNet {
 public:
  std::size_t in_dim = 2;
  std::vector<std::size_t> hidden{64, 64};
  double leaky_slope = 0.2;

  void init_params(ParameterStore& ps, Rng& rng);
  void expand_output_layer(ParameterStore& ps, Rng& rng, int new_total_classes);
  int num_classes() const { return num_classes_; }
  void set_num_classes(int k) { num_classes_ = k; }

  int build_trunk(Graph& g, int x) const;
  int logits(Graph& g, int x) const;  // [B,K]
  std::vector<double> probs_one(const ParameterStore& ps, const std::vector<double>& x) const;

  std::vector<std::string> trunk_names() const;
  std::vector<std::string> head_names() const;

 private:
  int num_classes_ = 0;
};

// Shared helper: appends head columns preserving existing entries.
void expand_head(ParameterStore& ps, Rng& rng, const std::string& w_name,
                 const std::string& b_name, int new_total);

}  // namespace trinet
