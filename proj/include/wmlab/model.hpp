#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wmlab/tensor.hpp"

namespace wmlab {

enum class ModelKind { Mlp, SmallCnn };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

// Two fixed desk-scale architectures:
//   Mlp      flatten -> fc(hidden[0]) -> relu -> ... -> fc(classes)
//   SmallCnn conv3x3(channels[0]) -> relu -> maxpool2 ->
//            conv3x3(channels[1]) -> relu -> maxpool2 -> fc(classes)
// Convolutions are stride 1 with 1-pixel zero padding, so SmallCnn needs
// input height/width divisible by 4.
struct ModelSpec {
    ModelKind kind = ModelKind::Mlp;
    int input_h = 28;
    int input_w = 28;
    int input_c = 1;
    int classes = 10;
    std::vector<int> hidden = {256, 128};  // Mlp fc widths (may be empty)
    std::vector<int> channels = {8, 16};   // SmallCnn conv channels (exactly 2)

    static ModelSpec mlp(int h, int w, int c, int classes);
    static ModelSpec small_cnn(int h, int w, int c, int classes);

    void validate() const;
    int input_count() const { return input_h * input_w * input_c; }

    // Parameter names and shapes in fixed iteration order. This order defines
    // flatten()/checkpoint layout.
    std::vector<std::pair<std::string, std::vector<int>>> param_layout() const;

    // Layer-group name prefixes ("fc1", "conv2", "out", ...) in forward order.
    std::vector<std::string> layer_groups() const;
};

bool operator==(const ModelSpec& a, const ModelSpec& b);

struct Model {
    ModelSpec spec;
    std::vector<std::string> names;  // fixed order, matches spec.param_layout()
    std::vector<Tensor> params;      // aligned with names

    static Model zeros(const ModelSpec& spec);
    static Model init(const ModelSpec& spec, uint64_t seed);  // He-uniform weights, zero biases

    size_t param_count() const;
    std::vector<float> flatten() const;
    void unflatten(const std::vector<float>& v);

    const Tensor& param(const std::string& name) const;
    Tensor& param(const std::string& name);
    int param_index(const std::string& name) const;
};

// Gradient (or any parameter-shaped vector), aligned with Model::params.
using ParamVector = std::vector<Tensor>;

ParamVector zeros_like(const Model& m);

// Scratch buffers reused across steps. One instance per concurrent caller.
struct GradWorkspace {
    std::vector<std::vector<float>> acts;  // forward activations
    std::vector<std::vector<int>> pool_idx;
    std::vector<std::vector<float>> f32;
    std::vector<std::vector<double>> f64;
};

// Logits for a batch. Accepts [B,H,W,C]; Mlp also accepts [B, H*W*C].
Tensor forward(const Model& m, const Tensor& batch);

struct LossGrads {
    double loss = 0.0;
    ParamVector grads;
};

// Mean softmax cross-entropy over the batch plus gradients for every
// parameter. Throws DivergedError (without epoch context) on non-finite loss.
LossGrads loss_and_grads(const Model& m, const Tensor& batch, const std::vector<int>& labels,
                         GradWorkspace* ws = nullptr);

// Mean cross-entropy only (no backward pass).
double batch_loss(const Model& m, const Tensor& batch, const std::vector<int>& labels);

// d(loss)/d(input) for a single sample; x is [H,W,C] (or flat for Mlp).
Tensor input_gradient(const Model& m, const Tensor& x, int label);

int predict(const Model& m, const Tensor& x);  // single sample; ties break to lowest class
std::vector<int> predict_batch(const Model& m, const Tensor& batch);

}  // namespace wmlab
