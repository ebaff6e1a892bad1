import logging

import numpy as np
import torch

logger = logging.getLogger(__name__)


class ScriptedModel:
    """ Inference wrapper around a TorchScript network.

    Arguments
    ----------
    path : <class 'str'>
        path of the scripted model saved with torch.jit.save
    device : <class 'str'>
        torch device name; CUDA when available, else CPU
    """

    def __init__(self, path, device=None):
        self.path = str(path)
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.net = torch.jit.load(self.path, map_location=self.device)
        self.net.eval()
        logger.info("Loaded scripted model %s on %s", self.path, self.device)

    def __call__(self, pixels):
        """ Runs one [H, W] patch as a [1, 1, H, W] batch and returns the first output as numpy. """

        tensor = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))
        tensor = tensor.reshape(1, 1, *tensor.shape).to(self.device)
        with torch.no_grad():
            output = self.net(tensor)
        return output[0].detach().cpu().numpy()

    def probabilities(self, pixels):
        """ Softmax over the class logits of one patch. """

        tensor = torch.from_numpy(np.asarray(self(pixels), dtype=np.float32)).reshape(-1)
        return torch.softmax(tensor, dim=0).numpy().astype(np.float64)
