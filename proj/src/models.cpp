#include "mkdt/models.hpp"

#include <cmath>
#include <stdexcept>

#include "mkdt/autodiff.hpp"
#include "mkdt/rng.hpp"

namespace mkdt {

void validate(const EncoderSpec& spec) {
  if (spec.dims.size() < 2) {
    throw std::invalid_argument("encoder spec: need at least input and output widths");
  }
  for (std::size_t d : spec.dims) {
    if (d == 0) throw std::invalid_argument("encoder spec: zero layer width");
  }
}

EncoderSpec teacher_spec(std::size_t d_in, std::size_t r) {
  return EncoderSpec{{d_in, 64, r}, Activation::kTanh, true};
}

EncoderSpec student_spec(std::size_t d_in, std::size_t r) {
  return EncoderSpec{{d_in, 16, r}, Activation::kTanh, true};
}

EncoderSpec linear_spec(std::size_t d_in, std::size_t d_out) {
  return EncoderSpec{{d_in, d_out}, Activation::kTanh, false};
}

std::size_t Encoder::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor& w : weights) n += w.size();
  for (const Tensor& b : biases) n += b.size();
  return n;
}

Encoder init_encoder(const EncoderSpec& spec, InitScheme scheme, std::uint64_t seed) {
  validate(spec);
  Encoder enc;
  enc.spec = spec;

  if (scheme == InitScheme::kIdentity) {
    if (spec.layer_count() != 1 || spec.in_dim() != spec.out_dim() || spec.bias) {
      throw std::invalid_argument(
          "identity initialization requires a square single-layer encoder without bias");
    }
    enc.weights.push_back(Tensor::identity(spec.in_dim()));
    return enc;
  }

  Rng rng(derive_seed(seed, 0));
  for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
    const std::size_t fan_in = spec.dims[l];
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    enc.weights.push_back(rng.uniform_tensor({spec.dims[l + 1], spec.dims[l]}, -bound, bound));
    if (spec.bias) enc.biases.push_back(Tensor::zeros({spec.dims[l + 1]}));
  }
  return enc;
}

Encoder linear_encoder(Tensor w) {
  if (w.rank() != 2) {
    throw std::invalid_argument("linear_encoder: weight must be a matrix, got shape " +
                                shape_str(w.shape));
  }
  Encoder enc;
  enc.spec = linear_spec(w.cols(), w.rows());
  enc.weights.push_back(std::move(w));
  return enc;
}

Tensor forward_layers(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases,
                      Activation activation, const Tensor& batch) {
  if (batch.rank() != 2) {
    throw std::invalid_argument("forward: batch must be rank 2, got shape " +
                                shape_str(batch.shape));
  }
  if (weights.empty()) throw std::invalid_argument("forward: encoder has no layers");
  if (batch.cols() != weights.front().cols()) {
    throw std::invalid_argument("forward: batch width " + std::to_string(batch.cols()) +
                                " does not match encoder input width " +
                                std::to_string(weights.front().cols()));
  }
  if (!biases.empty() && biases.size() != weights.size()) {
    throw std::invalid_argument("forward: bias count does not match layer count");
  }

  const std::size_t rows = batch.rows();
  Tensor a = batch;
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Tensor p = matmul(a, transpose(weights[l]));
    if (!biases.empty()) {
      // Broadcast the bias over rows: ones(rows x 1) * b^T.
      Tensor row_of_ones = Tensor::ones({rows, 1});
      p = add(p, matmul(row_of_ones, reshape(biases[l], {1, biases[l].size()})));
    }
    if (l + 1 < weights.size()) {
      a = activation == Activation::kTanh ? tanh_op(p) : relu(p);
    } else {
      a = p;  // final layer stays linear
    }
  }
  return a;
}

Tensor forward(const Encoder& encoder, const Tensor& batch) {
  return forward_layers(encoder.weights, encoder.biases, encoder.spec.activation, batch);
}

ForwardTrace forward_trace(const std::vector<Tensor>& weights, const std::vector<Tensor>& biases,
                           Activation activation, const Tensor& batch) {
  if (activation != Activation::kTanh && weights.size() > 1) {
    throw std::invalid_argument("forward_trace: only tanh encoders can be backpropagated in-graph");
  }
  ForwardTrace trace;
  trace.layer_inputs.reserve(weights.size() + 1);
  trace.layer_inputs.push_back(batch);
  const std::size_t rows = batch.rows();
  for (std::size_t l = 0; l < weights.size(); ++l) {
    Tensor p = matmul(trace.layer_inputs.back(), transpose(weights[l]));
    if (!biases.empty()) {
      Tensor row_of_ones = Tensor::ones({rows, 1});
      p = add(p, matmul(row_of_ones, reshape(biases[l], {1, biases[l].size()})));
    }
    trace.layer_inputs.push_back(l + 1 < weights.size() ? tanh_op(p) : p);
  }
  return trace;
}

LayerGrads backprop_from_trace(const ForwardTrace& trace, const std::vector<Tensor>& weights,
                               Activation activation, const Tensor& d_output) {
  if (activation != Activation::kTanh && weights.size() > 1) {
    throw std::invalid_argument("backprop_from_trace: only tanh encoders are supported");
  }
  if (trace.layer_inputs.size() != weights.size() + 1) {
    throw std::invalid_argument("backprop_from_trace: trace does not match the layer list");
  }
  const std::size_t layers = weights.size();

  // Bias gradients are always produced; bias-free callers simply ignore them.
  LayerGrads grads;
  grads.weights.resize(layers);
  grads.biases.resize(layers);

  const std::size_t rows = trace.layer_inputs[0].rows();
  Tensor column_of_ones = Tensor::ones({rows, 1});

  // d_p starts as the loss gradient at the (linear) final layer output and is
  // pulled back one layer at a time.
  Tensor d_p = d_output;
  for (std::size_t l = layers; l-- > 0;) {
    const Tensor& layer_in = trace.layer_inputs[l];
    grads.weights[l] = matmul(transpose(d_p), layer_in);
    grads.biases[l] = reshape(matmul(transpose(d_p), column_of_ones), {d_p.cols()});
    if (l == 0) break;
    Tensor d_a = matmul(d_p, weights[l]);
    // tanh'(p) written through the activation value a = tanh(p): 1 - a^2.
    const Tensor& a = trace.layer_inputs[l];
    Tensor one = Tensor::ones(a.shape);
    d_p = mul(d_a, sub(one, mul(a, a)));
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Flattened parameters
// ---------------------------------------------------------------------------

std::vector<Shape> expected_manifest(const EncoderSpec& spec) {
  validate(spec);
  std::vector<Shape> manifest;
  for (std::size_t l = 0; l + 1 < spec.dims.size(); ++l) {
    manifest.push_back({spec.dims[l + 1], spec.dims[l]});
    if (spec.bias) manifest.push_back({spec.dims[l + 1]});
  }
  return manifest;
}

FlatParams flatten(const Encoder& encoder) {
  FlatParams flat;
  std::vector<double> values;
  for (std::size_t l = 0; l < encoder.weights.size(); ++l) {
    flat.manifest.push_back(encoder.weights[l].shape);
    values.insert(values.end(), encoder.weights[l].data.begin(), encoder.weights[l].data.end());
    if (!encoder.biases.empty()) {
      flat.manifest.push_back(encoder.biases[l].shape);
      values.insert(values.end(), encoder.biases[l].data.begin(), encoder.biases[l].data.end());
    }
  }
  const std::size_t total = values.size();
  flat.values = Tensor({total}, std::move(values));
  return flat;
}

Encoder unflatten(const EncoderSpec& spec, const FlatParams& flat) {
  const std::vector<Shape> expect = expected_manifest(spec);
  if (flat.manifest.size() != expect.size()) {
    throw std::invalid_argument("unflatten: manifest has " + std::to_string(flat.manifest.size()) +
                                " entries, spec expects " + std::to_string(expect.size()));
  }
  for (std::size_t i = 0; i < expect.size(); ++i) {
    if (!shapes_equal(flat.manifest[i], expect[i])) {
      throw std::invalid_argument("unflatten: manifest entry " + std::to_string(i) + " has shape " +
                                  shape_str(flat.manifest[i]) + ", spec expects " +
                                  shape_str(expect[i]));
    }
  }

  Encoder enc;
  enc.spec = spec;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < expect.size(); ++i) {
    const std::size_t count = shape_numel(expect[i]);
    if (offset + count > flat.values.size()) {
      throw std::invalid_argument("unflatten: flat vector too short for the manifest");
    }
    Tensor t(expect[i], std::vector<double>(flat.values.data.begin() + offset,
                                            flat.values.data.begin() + offset + count));
    if (expect[i].size() == 2) {
      enc.weights.push_back(std::move(t));
    } else {
      enc.biases.push_back(std::move(t));
    }
    offset += count;
  }
  if (offset != flat.values.size()) {
    throw std::invalid_argument("unflatten: flat vector longer than the manifest describes");
  }
  return enc;
}

}  // namespace mkdt
