#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lfusion/common.hpp"
#include "lfusion/rng.hpp"
#include "lfusion/tensor.hpp"

namespace lfusion {

// Minimal manually-differentiated network: exactly the layer set the
// encoder and the two uncertainty heads need, nothing more.
//
// Layouts: 2-D data is (C, H, W); 3-D (clip) data is (C, T, H, W) with T the
// frame axis.  There is no batch dimension — one sample at a time.

enum class LayerKind {
    Conv2d,
    Conv3d,
    BatchNorm2d,
    BatchNorm3d,
    Relu,
    Upsample2x,  // nearest neighbour; doubles the trailing two (H, W) axes
    Dropout,     // inverted dropout; identity in eval mode
    Bias,        // standalone per-channel bias add
};

struct LayerSpec {
    LayerKind kind;
    int in_channels = 0;
    int out_channels = 0;
    int kernel = 1;  // cubic kernel extent; padding is (kernel-1)/2 per side
    int stride = 1;  // spatial stride; conv3d keeps temporal stride 1
    double rate = 0.0;  // dropout keep-complement

    static LayerSpec conv2d(int in_c, int out_c, int kernel = 3, int stride = 1);
    static LayerSpec conv3d(int in_c, int out_c, int kernel = 3, int stride = 1);
    static LayerSpec batchnorm2d(int channels);
    static LayerSpec batchnorm3d(int channels);
    static LayerSpec relu();
    static LayerSpec upsample2x();
    static LayerSpec dropout(double rate);
    static LayerSpec bias(int channels);
};

enum class Mode { Train, Eval, McDropout };

struct Network {
    std::vector<LayerSpec> layers;
    // Learnable tensors per layer: conv {W, b}; batchnorm {gamma, beta};
    // bias {b}; other layers own nothing.
    std::vector<std::vector<Tensor>> params;
    // Non-learnable state per layer: batchnorm {running_mean, running_var}.
    std::vector<std::vector<Tensor>> buffers;

    std::size_t param_count() const;
    std::uint64_t signature() const;
};

// He-normal conv init (zero biases, unit batchnorm) from the given stream.
Network network_new(const std::vector<LayerSpec>& layers, RngStream& init_rng);

struct Activations {
    Mode mode = Mode::Eval;
    std::uint64_t net_signature = 0;
    // acts[0] is the input; acts[i+1] is layer i's output.
    std::vector<Tensor> acts;
    // Per layer: dropout keep mask (0/1), batchnorm train-time batch stats.
    std::vector<std::optional<Tensor>> masks;
    std::vector<std::optional<Tensor>> bn_mean;
    std::vector<std::optional<Tensor>> bn_var;

    const Tensor& output() const { return acts.back(); }
};

// Runs the network.  rng is consulted only when a dropout layer with rate>0
// is active for the given mode; passing none in that case is a ConfigError.
// Train mode also updates batchnorm running statistics in-place.
Activations forward(Network& net, const Tensor& x, Mode mode, RngStream* rng = nullptr);

// Eval-mode forward without touching any state.
Tensor forward_eval(const Network& net, const Tensor& x);

struct GradBundle {
    std::vector<std::vector<Tensor>> param_grads;  // mirrors Network::params
    Tensor input_grad;

    void accumulate(const GradBundle& other, double scale = 1.0);
};

// Exact gradients of <output, grad_out> with respect to every parameter and
// the input, replaying the recorded dropout masks / batch statistics.
GradBundle backward(const Network& net, const Activations& acts, const Tensor& grad_out);

struct OptimConfig {
    double lr = 1e-2;
    double momentum = 0.0;
    double weight_decay = 0.0;
};

struct OptimState {
    std::vector<std::vector<Tensor>> velocity;  // lazily sized on first step
};

// v <- momentum*v + (g + wd*theta); theta <- theta - lr*v
void optimizer_step(Network& net, const GradBundle& grads, const OptimConfig& cfg,
                    OptimState& state);

// Bijection between the learnable tensors and one flat vector, in layer
// order with each layer's tensors in declaration order, row-major inside
// each tensor.  Batchnorm running statistics are excluded.
Tensor params_flatten(const Network& net);
void params_load(Network& net, const Tensor& flat);

// Jacobian products with respect to the parameters at fixed input, eval
// mode.  tangent/cotangent are flat vectors in params_flatten order.
Tensor jvp(const Network& net, const Tensor& x, const Tensor& tangent,
           const Tensor* input_tangent = nullptr);
Tensor vjp(const Network& net, const Tensor& x, const Tensor& cotangent);

// "LFC1" checkpoint: magic, manifest of layer descriptor lines, then every
// parameter and buffer tensor as consecutive LFT1 blocks.
void checkpoint_save(const Network& net, const std::string& path);
Network checkpoint_load(const std::string& path);

}  // namespace lfusion
