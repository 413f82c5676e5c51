#pragma once

#include "eqat/error.hpp"
#include "eqat/tensor.hpp"
#include "eqat/autograd.hpp"
#include "eqat/optim.hpp"
#include "eqat/quant.hpp"
#include "eqat/qlinear.hpp"
#include "eqat/model.hpp"
#include "eqat/data.hpp"
#include "eqat/pack.hpp"
#include "eqat/checkpoint.hpp"
#include "eqat/kernels.hpp"
#include "eqat/pretrain.hpp"
#include "eqat/block_ap.hpp"
#include "eqat/e2e_qp.hpp"
#include "eqat/config.hpp"
#include "eqat/runtime.hpp"
