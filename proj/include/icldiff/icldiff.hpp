#pragma once

#include "autograd.hpp"
#include "checkpoint.hpp"
#include "config.hpp"
#include "context.hpp"
#include "corpus.hpp"
#include "denoiser.hpp"
#include "diffusion.hpp"
#include "errors.hpp"
#include "evaluation.hpp"
#include "image.hpp"
#include "model.hpp"
#include "nn.hpp"
#include "ops.hpp"
#include "optim.hpp"
#include "parallel.hpp"
#include "rng.hpp"
#include "tensor.hpp"
#include "text.hpp"
#include "training.hpp"
