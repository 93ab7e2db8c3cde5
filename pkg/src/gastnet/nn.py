"""Parameter containers shared by the layer modules."""
import numpy as np

from .tensor import BatchNormState, Tensor


def glorot(rng, shape, fan_in, fan_out, dtype=np.float32):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Module:
    """Walks its attributes (in assignment order) to enumerate parameters.

    Tensors with ``requires_grad`` are parameters, :class:`BatchNormState`
    contributes ``gamma``/``beta`` plus running-statistic buffers, and nested
    modules (or lists of them) are visited recursively.
    """

    training = True

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield f"{key}{i}", item
            elif isinstance(val, (Module, Tensor, BatchNormState)):
                yield key, val

    def named_parameters(self, prefix=""):
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, BatchNormState):
                yield name + ".gamma", val.gamma
                yield name + ".beta", val.beta
            elif val.requires_grad:
                yield name, val

    def named_buffers(self, prefix=""):
        for key, val in self._children():
            name = f"{prefix}{key}"
            if isinstance(val, Module):
                yield from val.named_buffers(name + ".")
            elif isinstance(val, BatchNormState):
                yield name + ".running_mean", val.running_mean
                yield name + ".running_var", val.running_var

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def batchnorms(self):
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.batchnorms()
            elif isinstance(val, BatchNormState):
                yield val

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype):
        """Cast every parameter and buffer in place."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for bn in self.batchnorms():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def num_parameters(self):
        return sum(p.size for p in self.parameters())
