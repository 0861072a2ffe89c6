#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mkdt/tensor.hpp"

namespace mkdt {

enum class Activation { kTanh, kRelu };

/// Layer widths from input to representation, e.g. {8, 16, 4} for one hidden
/// layer. Two entries and bias=false describe a pure linear map f(x) = Wx.
struct EncoderSpec {
  std::vector<std::size_t> dims;
  Activation activation = Activation::kTanh;
  bool bias = true;

  std::size_t in_dim() const { return dims.front(); }
  std::size_t out_dim() const { return dims.back(); }
  std::size_t layer_count() const { return dims.size() - 1; }
  bool operator==(const EncoderSpec&) const = default;
};

/// Throws std::invalid_argument if the spec is malformed.
void validate(const EncoderSpec& spec);

/// Desk-scale stand-ins: a wide teacher and a narrow student that share the
/// representation dimension r.
EncoderSpec teacher_spec(std::size_t d_in, std::size_t r);
EncoderSpec student_spec(std::size_t d_in, std::size_t r);
/// Single-layer f(x) = Wx with no bias.
EncoderSpec linear_spec(std::size_t d_in, std::size_t d_out);

/// Feed-forward encoder. weights[l] maps dims[l] -> dims[l+1] and is stored
/// as a dims[l+1] x dims[l] matrix; the activation sits between layers, so
/// the final layer's output is linear.
struct Encoder {
  EncoderSpec spec;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;  // empty when spec.bias is false

  std::size_t parameter_count() const;
};

enum class InitScheme {
  kIdentity,  // W = I; only for square single-layer encoders without bias
  kFanIn,     // W_ij ~ U(+-sqrt(3/fan_in)) so std = 1/sqrt(fan_in); biases 0
};

Encoder init_encoder(const EncoderSpec& spec, InitScheme scheme, std::uint64_t seed);
/// Wraps an existing matrix as a bias-free single-layer encoder.
Encoder linear_encoder(Tensor w);

/// Representations for a batch (rows are examples). Works on plain tensors
/// and on graph-tracked ones alike; layer math goes through the tensor ops.
Tensor forward(const Encoder& encoder, const Tensor& batch);
/// Same computation over externally managed parameters (used when the
/// parameters are tracked tensors inside a larger differentiated expression).
Tensor forward_layers(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases,
                      Activation activation, const Tensor& batch);

/// Activations recorded during a forward pass: layer_inputs[l] feeds layer l,
/// layer_inputs[L] is the final output.
struct ForwardTrace {
  std::vector<Tensor> layer_inputs;
};

/// Per-parameter gradient expressions for a batch loss, given the gradient of
/// the loss with respect to the encoder output. Everything is built from
/// first-order tensor ops, so the result can itself be differentiated when
/// the parameters (or data) are tracked — this is how SGD steps stay inside
/// one differentiable expression without second-order support in the tape.
/// Only tanh activations are supported (the unrolled path needs smoothness).
struct LayerGrads {
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;  // empty when the encoder has no biases
};

ForwardTrace forward_trace(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases,
                           Activation activation, const Tensor& batch);
LayerGrads backprop_from_trace(const ForwardTrace& trace, const std::vector<Tensor>& weights,
                               Activation activation, const Tensor& d_output);

/// All parameters in one vector: layer 0 weight (row-major), layer 0 bias,
/// layer 1 weight, ... The manifest lists the source shapes in that order.
struct FlatParams {
  Tensor values;                // rank 1
  std::vector<Shape> manifest;

  std::size_t size() const { return values.size(); }
};

FlatParams flatten(const Encoder& encoder);
/// Rebuilds an encoder; throws when the manifest does not match the spec.
Encoder unflatten(const EncoderSpec& spec, const FlatParams& flat);
/// The manifest an encoder of this spec produces.
std::vector<Shape> expected_manifest(const EncoderSpec& spec);

}  // namespace mkdt
