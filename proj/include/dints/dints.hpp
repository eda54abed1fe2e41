#pragma once

#include "dints/arch_loss.hpp"
#include "dints/autodiff.hpp"
#include "dints/cell_ops.hpp"
#include "dints/decode.hpp"
#include "dints/discrete.hpp"
#include "dints/engine.hpp"
#include "dints/error.hpp"
#include "dints/grad_check.hpp"
#include "dints/nn_ops.hpp"
#include "dints/ops.hpp"
#include "dints/optim.hpp"
#include "dints/oracle.hpp"
#include "dints/relax.hpp"
#include "dints/space.hpp"
#include "dints/supernet.hpp"
#include "dints/task.hpp"
#include "dints/tensor.hpp"
