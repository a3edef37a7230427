"""
OFA Lab 包初始化
器官聚焦注意力（Organ-Focused Attention）训练、评估与可视化工具集
"""

__version__ = "1.0.0"
