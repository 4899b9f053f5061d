"""Text, DOT and CSV renderers for trees, networks and score tables."""

from typing import TYPE_CHECKING, List, Optional, Sequence

import numpy as np
import pandas as pd

from .learners import TreeNode

if TYPE_CHECKING:
    from .featsel import FeatureScore
    from .fms import RegressionTree
    from .netinfer import AssociationNetwork

SCORE_COLUMNS = (
    "otu",
    "KBest",
    "Mutual",
    "LR",
    "DT",
    "GB",
    "RF",
    "Max",
    "TOTAL",
    "net_degree_diff",
    "combined",
)


def _quote(text: str) -> str:
    """DOT double-quoted string; escapes such as \\n in ``text`` pass through."""
    return '"' + str(text).replace('"', '\\"') + '"'


def _node_mean(node: TreeNode) -> float:
    return float(np.asarray(node.value).ravel()[0])


class FmsTextFormatter:
    """Indented text view of a full-model-selection tree.

    Every node shows coverage and mean weighted F1; children are prefixed with the
    condition that leads to them, the "= 0" branch first.
    """

    def __init__(self, indent: str = "    "):
        self.indent = indent

    def describe(self, tree: "RegressionTree", node: TreeNode) -> str:
        return f"{tree.coverage(node):.1f}% | mean={_node_mean(node):.3f}"

    def render(self, tree: "RegressionTree") -> str:
        lines: List[str] = [self.describe(tree, tree.root)]
        self._children(tree, tree.root, 1, lines)
        return "\n".join(lines) + "\n"

    def _children(self, tree: "RegressionTree", node: TreeNode, depth: int, lines: List[str]):
        if node.is_leaf:
            return
        name = tree.feature_names[node.feature]
        for value, child in ((0, node.left), (1, node.right)):
            lines.append(f"{self.indent * depth}{name} = {value}: {self.describe(tree, child)}")
            self._children(tree, child, depth + 1, lines)


class FmsDotFormatter:
    """Graphviz digraph of a full-model-selection tree; the left edge is the true branch."""

    def render(self, tree: "RegressionTree") -> str:
        lines = ["digraph fms {", "    node [shape=box];"]
        counter = iter(range(tree.root.n_nodes()))

        def visit(node: TreeNode) -> int:
            idx = next(counter)
            summary = f"{tree.coverage(node):.1f}% | mean={_node_mean(node):.3f}"
            label = summary if node.is_leaf else f"{tree.condition(node)}\\n{summary}"
            lines.append(f"    n{idx} [label={_quote(label)}];")
            if not node.is_leaf:
                left = visit(node.left)
                lines.append(f'    n{idx} -> n{left} [label="True"];')
                right = visit(node.right)
                lines.append(f'    n{idx} -> n{right} [label="False"];')
            return idx

        visit(tree.root)
        lines.append("}")
        return "\n".join(lines) + "\n"


class ClassifierTreeDotFormatter:
    """Graphviz digraph of a fitted classification tree."""

    def render(self, root: TreeNode, feature_names: Optional[Sequence[str]] = None) -> str:
        lines = ["digraph tree {", "    node [shape=box];"]
        counter = iter(range(root.n_nodes()))

        def visit(node: TreeNode) -> int:
            idx = next(counter)
            probs = ", ".join(f"{v:.3f}" for v in np.asarray(node.value).ravel())
            stats = f"samples={node.n_samples}\\nvalue=[{probs}]"
            if node.is_leaf:
                label = stats
            else:
                name = feature_names[node.feature] if feature_names else f"x[{node.feature}]"
                label = f"{name} <= {node.threshold:.6g}\\n{stats}"
            lines.append(f"    n{idx} [label={_quote(label)}];")
            if not node.is_leaf:
                left = visit(node.left)
                lines.append(f"    n{idx} -> n{left};")
                right = visit(node.right)
                lines.append(f"    n{idx} -> n{right};")
            return idx

        visit(root)
        lines.append("}")
        return "\n".join(lines) + "\n"


class NetworkDotFormatter:
    """Undirected Graphviz graph of an association network.

    Positive partial correlations are drawn green, negative ones red.
    """

    def render(self, network: "AssociationNetwork", name: str = "network") -> str:
        lines = [f"graph {_quote(name)} {{"]
        for node in network.nodes:
            lines.append(f"    {_quote(node)};")
        for i, j in network.edges:
            weight = float(network.partial[i, j])
            color = "green" if weight > 0 else "red"
            lines.append(
                f"    {_quote(network.nodes[i])} -- {_quote(network.nodes[j])} "
                f'[color={color}, weight="{abs(weight):.4f}"];'
            )
        lines.append("}")
        return "\n".join(lines) + "\n"


class ScoreTableFormatter:
    """The per-OTU selection table: one flag column per criterion, TOTAL and network columns."""

    def frame(self, scores: Sequence["FeatureScore"]) -> pd.DataFrame:
        from .featsel import CRITERIA

        rows = []
        for s in scores:
            row = {"otu": s.otu}
            row.update({c: int(s.flag(c)) for c in CRITERIA})
            row.update(TOTAL=s.total, net_degree_diff=s.net_degree_diff, combined=s.combined)
            rows.append(row)
        return pd.DataFrame(rows, columns=list(SCORE_COLUMNS))

    def render(self, scores: Sequence["FeatureScore"]) -> str:
        return self.frame(scores).to_csv(index=False)


# Global formatter instances
fms_text = FmsTextFormatter()
fms_dot = FmsDotFormatter()
tree_dot = ClassifierTreeDotFormatter()
network_dot = NetworkDotFormatter()
score_table = ScoreTableFormatter()
