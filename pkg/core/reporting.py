"""
训练报告图表生成
训练曲线（损失 + 精度，双 Y 轴）与消融对比曲线，输出 HTML
"""
import logging
import os

import plotly.graph_objects as go
from plotly.subplots import make_subplots

logger = logging.getLogger(__name__)


def training_curves_chart(metrics, output_dir, title='训练曲线'):
    """
    每个 epoch 的训练/验证损失（左轴）与精度（右轴）

    Args:
        metrics: DataFrame，列为 epoch,train_loss,train_acc,val_loss,val_acc,lr,seconds
        output_dir: 输出目录

    Returns:
        str: 文件路径
    """
    fig = make_subplots(specs=[[{"secondary_y": True}]])

    fig.add_trace(
        go.Scatter(x=metrics['epoch'], y=metrics['train_loss'], name='训练损失',
                   mode='lines+markers', line=dict(color='#1f77b4', width=2)),
        secondary_y=False
    )
    fig.add_trace(
        go.Scatter(x=metrics['epoch'], y=metrics['val_loss'], name='验证损失',
                   mode='lines+markers', line=dict(color='#1f77b4', width=2, dash='dot')),
        secondary_y=False
    )
    fig.add_trace(
        go.Scatter(x=metrics['epoch'], y=metrics['train_acc'], name='训练精度',
                   mode='lines+markers', line=dict(color='#ff7f0e', width=2)),
        secondary_y=True
    )
    fig.add_trace(
        go.Scatter(x=metrics['epoch'], y=metrics['val_acc'], name='验证精度',
                   mode='lines+markers', line=dict(color='#2ca02c', width=3),
                   marker=dict(size=8, symbol='diamond')),
        secondary_y=True
    )

    if len(metrics):
        best = metrics.loc[metrics['val_acc'].idxmax()]
        fig.add_annotation(
            x=best['epoch'], y=best['val_acc'],
            text=f"最佳验证精度: {best['val_acc']:.4f} (epoch {int(best['epoch'])})",
            showarrow=True, arrowhead=1, ax=-80, ay=-30,
            bgcolor="white", bordercolor="red", borderwidth=1,
            secondary_y=True
        )

    fig.update_layout(
        title={'text': title, 'y': 0.95, 'x': 0.5, 'xanchor': 'center', 'yanchor': 'top'},
        xaxis_title='epoch',
        template='plotly_white',
        hovermode='x unified',
        legend_title_text='指标',
        height=600,
        width=1100,
    )
    fig.update_yaxes(title_text="交叉熵损失", secondary_y=False)
    fig.update_yaxes(title_text="精度", secondary_y=True, range=[0, 1])

    chart_path = os.path.join(output_dir, 'training_curves.html')
    fig.write_html(chart_path, include_plotlyjs='cdn')
    logger.info(f"✓ 训练曲线已保存: {chart_path}")
    return chart_path


def ablation_chart(curves, output_dir):
    """
    每个种子下 filter / dropout 两种变体的验证精度曲线

    Args:
        curves: DataFrame，含 seed, variant, epoch, val_acc
        output_dir: 输出目录

    Returns:
        str: 文件路径
    """
    colors = {'filter': '#2ca02c', 'dropout': '#d62728'}
    fig = go.Figure()
    for (seed, variant), rows in curves.groupby(['seed', 'variant']):
        rows = rows.sort_values('epoch')
        fig.add_trace(go.Scatter(
            x=rows['epoch'], y=rows['val_acc'], mode='lines+markers',
            name=f"{variant} (seed {seed})",
            line=dict(color=colors.get(variant, '#7f7f7f'), width=2,
                      dash='solid' if variant == 'filter' else 'dash'),
        ))
    fig.update_layout(
        title={'text': 'FilterViT vs DropoutViT 验证精度', 'x': 0.5, 'xanchor': 'center'},
        xaxis_title='epoch',
        yaxis_title='验证精度',
        template='plotly_white',
        hovermode='x unified',
        height=600,
        width=1100,
    )
    chart_path = os.path.join(output_dir, 'ablation_curves.html')
    fig.write_html(chart_path, include_plotlyjs='cdn')
    logger.info(f"✓ 消融对比曲线已保存: {chart_path}")
    return chart_path
