#pragma once

#include "askbuild/agent.hpp"
#include "askbuild/autograd.hpp"
#include "askbuild/checkpoint.hpp"
#include "askbuild/corpus.hpp"
#include "askbuild/error.hpp"
#include "askbuild/evaluation.hpp"
#include "askbuild/model.hpp"
#include "askbuild/nn.hpp"
#include "askbuild/optim.hpp"
#include "askbuild/server.hpp"
#include "askbuild/session.hpp"
#include "askbuild/synth.hpp"
#include "askbuild/task.hpp"
#include "askbuild/tensor.hpp"
#include "askbuild/training.hpp"
#include "askbuild/world.hpp"
