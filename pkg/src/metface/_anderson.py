import numpy as np


class Anderson:
    """Type-II Anderson mixing for a fixed-point map ``x -> g(x)``.

    Callers evaluate the proposal themselves and fall back to the plain
    iterate ``g`` when it does not reduce their objective.
    """

    def __init__(self, window: int = 5):
        self.window = window
        self.G, self.F = [], []

    def propose(self, x, g):
        """Record ``(x, g(x))``; return an extrapolated iterate or ``None``."""
        self.G.append(np.asarray(g, float))
        self.F.append(np.asarray(g, float) - np.asarray(x, float))
        del self.G[:-(self.window + 1)], self.F[:-(self.window + 1)]
        if self.window == 0 or len(self.F) < 2:
            return None
        dF = np.diff(np.array(self.F), axis=0).T
        dG = np.diff(np.array(self.G), axis=0).T
        gamma = np.linalg.lstsq(dF, self.F[-1], rcond=None)[0]
        out = self.G[-1] - dG @ gamma
        return out if np.all(np.isfinite(out)) else None

    def reset(self):
        self.G.clear()
        self.F.clear()
